"""Phased optimisation of the hybrid model.

Phases:

``vae``    encoder + factored decoder on the auxiliary bound
``ar``     conditional decoder, conditioned on the true auxiliary image
``joint``  all parameters on the full three-term objective
``ablate`` all parameters with the auxiliary term removed
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import make_aux
from .errors import NonFiniteLoss
from .model import AgaveModel
from .nn import adamax_step
from .objectives import agave_loss, code_length_report, teacher_forced_loss

logger = logging.getLogger(__name__)

PHASES = ("vae", "ar", "joint", "ablate")
_PHASE_PREFIXES = {
    "vae": ("encoder.", "aux."),
    "ar": ("ar.", "cond."),
    "joint": ("",),
    "ablate": ("",),
}


@dataclass
class Schedule:
    vae_steps: int = 0
    ar_steps: int = 0
    joint_steps: int = 0
    batch_size: int = 32
    log_every: int = 100
    checkpoint_every: int = 0


def format_record(record: Dict) -> str:
    parts = []
    for key, value in record.items():
        if isinstance(value, float):
            value = repr(round(value, 9))
        parts.append(f"{key}={value}")
    return " ".join(parts)


def parse_record(line: str) -> Dict:
    record = {}
    for part in line.split():
        key, value = part.split("=", 1)
        try:
            record[key] = int(value)
        except ValueError:
            try:
                record[key] = float(value)
            except ValueError:
                record[key] = value
    return record


class Trainer:
    """Owns the optimiser hyper-parameters, the data stream and the PRNG."""

    def __init__(self, model: AgaveModel, images: np.ndarray, seed: int = 0, lr: float = 0.002,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 log_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None,
                 train_state: Optional[Dict] = None, rng_state: Optional[Dict] = None):
        self.model = model
        self.images = np.asarray(images)
        self.aux_images = make_aux(self.images, model.config.aux_spec)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.rng = np.random.default_rng(seed)
        if rng_state:
            self.rng.bit_generator.state = rng_state
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.state = {"step": 0, **{p: 0 for p in PHASES}}
        if train_state:
            self.state.update(train_state)
        self.records: List[Dict] = []

    def _names(self, phase: str) -> List[str]:
        prefixes = _PHASE_PREFIXES[phase]
        return [n for n in self.model.store if n.startswith(prefixes)]

    def _batch(self, batch_size: int):
        idx = self.rng.integers(0, len(self.images), size=batch_size)
        return self.images[idx], self.aux_images[idx]

    def step(self, phase: str, batch_size: int, lam: Optional[float] = None) -> Dict[str, float]:
        model = self.model
        lam = model.config.lam if lam is None else lam
        x, y = self._batch(batch_size)
        model.store.zero_grad()
        if phase == "ar":
            loss = teacher_forced_loss(x, y, model)
            metrics = {"primary": -float(loss.data), "aux": 0.0, "kl": 0.0, "lambda": float(lam), "total": float(loss.data)}
        else:
            noise = model.latent_noise(self.rng, batch_size)
            report = agave_loss(x, y, model, lam, noise, use_primary=phase != "vae", use_aux=phase != "ablate")
            loss = report.total
            metrics = report.as_dict()
        if not np.isfinite(loss.data):
            raise NonFiniteLoss(f"loss became {float(loss.data)} at step {self.state['step']} ({phase})")
        ad.backward(loss)
        grads = {n: model.store.params[n].grad for n in self._names(phase) if model.store.params[n].grad is not None}
        adamax_step(model.store, grads, self.lr, self.beta1, self.beta2, self.eps)
        self.state["step"] += 1
        self.state[phase] += 1
        return metrics

    def run_phase(self, phase: str, steps: int, batch_size: int = 32, log_every: int = 100,
                  checkpoint_every: int = 0, lam: Optional[float] = None) -> List[Dict]:
        """Run ``steps`` updates, logging interval means of the loss terms."""
        records = []
        acc: Dict[str, float] = {}
        count = 0
        for _ in range(steps):
            metrics = self.step(phase, batch_size, lam)
            for k, v in metrics.items():
                acc[k] = acc.get(k, 0.0) + v
            count += 1
            if log_every and self.state["step"] % log_every == 0:
                records.append(self._emit(phase, acc, count))
                acc, count = {}, 0
            if checkpoint_every and self.checkpoint_path and self.state["step"] % checkpoint_every == 0:
                self.save()
        if count:
            records.append(self._emit(phase, acc, count))
        return records

    def run(self, schedule: Schedule) -> List[Dict]:
        """Run whatever part of ``schedule`` is not yet done (resumable)."""
        records = []
        for phase, target in (("vae", schedule.vae_steps), ("ar", schedule.ar_steps), ("joint", schedule.joint_steps)):
            remaining = max(0, target - self.state[phase])
            if remaining:
                records += self.run_phase(phase, remaining, schedule.batch_size, schedule.log_every,
                                          schedule.checkpoint_every)
        if self.checkpoint_path:
            self.save()
        return records

    def _emit(self, phase: str, acc: Dict[str, float], count: int) -> Dict:
        record = {"step": self.state["step"], "phase": phase}
        record.update({k: v / count for k, v in acc.items()})
        self.records.append(record)
        logger.info(format_record(record))
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a") as fh:
                fh.write(format_record(record) + "\n")
        return record

    def save(self, path: Optional[Path] = None) -> Path:
        return save_checkpoint(self.model, path or self.checkpoint_path, dict(self.state),
                               self.rng.bit_generator.state)


def held_out_terms(model: AgaveModel, images: np.ndarray, seed: int = 12345, batch_size: int = 100) -> Dict[str, float]:
    """Mean KL, auxiliary and primary negative log-likelihoods with fixed noise."""
    rng = np.random.default_rng(seed)
    y_all = make_aux(images, model.config.aux_spec)
    sums = {"kl": 0.0, "aux_nll": 0.0, "primary_nll": 0.0}
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        y = y_all[start:start + batch_size]
        report = code_length_report(model, x, y, model.latent_noise(rng, len(x)))
        sums["kl"] += report.kl_term * len(x)
        sums["aux_nll"] += report.aux_nll * len(x)
        sums["primary_nll"] += report.primary_nll * len(x)
    return {k: v / len(images) for k, v in sums.items()}
