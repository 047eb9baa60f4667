"""The hybrid model: shared encoder, factored auxiliary decoder, conditional
masked-convolution decoder, plus sampling and latent interpolation."""
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import AuxiliarySpec
from .distributions import (
    DiscretizedLogisticParams,
    PosteriorParams,
    QuantizationSpec,
    disc_logistic_logprob,
    disc_logistic_sample,
    gaussian_kl,
    gaussian_log_density,
    gaussian_rsample,
    standard_normal_log_density,
)
from .errors import ShapeMismatch

# Scale heads are multiplied by this gain so that Adamax's bounded step can move
# the logistic scale across its pixel-unit range in a few hundred updates.
SCALE_GAIN = 8.0
INITIAL_SCALE_PARAM = 2.0
PIXEL_RANGE = 256.0


@dataclass
class ModelConfig:
    height: int = 8
    width: int = 8
    latent_dim: int = 32
    encoder_width: int = 32
    decoder_width: int = 32
    ar_layers: int = 4
    ar_width: int = 32
    ar_first_kernel: int = 5
    ar_kernel: int = 3
    cond_layers: Optional[int] = None
    cond_width: int = 16
    aux_levels: int = 256
    aux_height: Optional[int] = None
    aux_width: Optional[int] = None
    aux_grayscale: bool = False
    lam: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.ar_layers < 1:
            raise ValueError("the autoregressive stack needs at least one masked layer")
        if self.height % 4 or self.width % 4:
            raise ValueError("image extents must be multiples of 4")
        if self.cond_layers is None:
            self.cond_layers = self.ar_layers
        self.aux_spec.target_extents(self.height, self.width)

    @property
    def aux_spec(self) -> AuxiliarySpec:
        extents = None
        if self.aux_height is not None or self.aux_width is not None:
            extents = (self.aux_height or self.height, self.aux_width or self.width)
        return AuxiliarySpec(QuantizationSpec(self.aux_levels), extents, self.aux_grayscale)

    @property
    def aux_extents(self) -> Tuple[int, int]:
        return self.aux_spec.target_extents(self.height, self.width)

    @property
    def dims(self) -> int:
        return 3 * self.height * self.width

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class AuxDecoderOutput:
    f_z: Tensor
    raw_scale: Tensor
    quantization: QuantizationSpec

    @property
    def params(self) -> DiscretizedLogisticParams:
        return DiscretizedLogisticParams(self.f_z, self.raw_scale, self.quantization)

    def render(self) -> np.ndarray:
        """Logistic means snapped to the auxiliary level grid."""
        return self.quantization.quantize(np.clip(self.f_z.data, 0, 255)).astype(np.uint8)


def _halvings(h: int, w: int) -> int:
    count = 0
    while h % 2 == 0 and w % 2 == 0 and h // 2 >= 4 and w // 2 >= 4:
        h, w, count = h // 2, w // 2, count + 1
    return count


def to_unit_range(pixels) -> Tensor:
    """Map (n, c, h, w) pixel values in [0, 255] to channels-last values in [-1, 1]."""
    arr = np.asarray(pixels.data if isinstance(pixels, Tensor) else pixels, dtype=ad.get_default_dtype())
    return Tensor(np.ascontiguousarray(arr.transpose(0, 2, 3, 1)) / 127.5 - 1.0)


def _nchw(t: Tensor) -> Tensor:
    return ad.transpose(t, (0, 3, 1, 2))


def _nhwc(t: Tensor) -> Tensor:
    return ad.transpose(t, (0, 2, 3, 1))


class AgaveModel:
    """Parameters and forward passes of all three networks.

    Images, auxiliary images, f(z) and the decoder parameters use (n, c, h, w)
    at the public methods; activations are channels-last internally and
    kernels are stored as (kh, kw, in, out).
    """

    def __init__(self, config: ModelConfig, dtype=None):
        self.config = config
        self.store = nn.ParameterStore(seed=config.seed, dtype=dtype)
        self._build()

    # -- construction ------------------------------------------------------
    def _build(self):
        cfg, s = self.config, self.store
        e, d = cfg.encoder_width, cfg.decoder_width
        s.add("encoder.conv0.weight", (3, 3, 3, e))
        s.add("encoder.conv0.bias", (e,), init="constant")
        self._enc_downs = _halvings(cfg.height, cfg.width)
        for i in range(self._enc_downs):
            s.add(f"encoder.down{i}.weight", (3, 3, e, e))
            s.add(f"encoder.down{i}.bias", (e,), init="constant")
        eh, ew = cfg.height >> self._enc_downs, cfg.width >> self._enc_downs
        s.add("encoder.head.weight", (e * eh * ew, 2 * cfg.latent_dim), fan_in=e * eh * ew, gain=0.5)
        s.add("encoder.head.bias", (2 * cfg.latent_dim,), init="constant")

        ah, aw = cfg.aux_extents
        ac = cfg.aux_spec.channels
        self._dec_ups = _halvings(ah, aw)
        self._dec_base = (ah >> self._dec_ups, aw >> self._dec_ups)
        bh, bw = self._dec_base
        s.add("aux.fc.weight", (cfg.latent_dim, d * bh * bw), fan_in=cfg.latent_dim)
        s.add("aux.fc.bias", (d * bh * bw,), init="constant")
        for i in range(self._dec_ups):
            s.add(f"aux.up{i}.weight", (3, 3, d, d))
            s.add(f"aux.up{i}.bias", (d,), init="constant")
        s.add("aux.out.weight", (3, 3, d, ac), gain=0.5)
        s.add("aux.out.bias", (ac,), init="constant")
        s.add("aux.raw_scale", (ac,), init="constant", value=INITIAL_SCALE_PARAM)

        w, cw = cfg.ar_width, cfg.cond_width
        k0, k = cfg.ar_first_kernel, cfg.ar_kernel
        s.add("ar.layer0.weight", (k0, k0, 3, w), fan_in=3 * k0 * k0 // 2 + 1)
        s.add("ar.layer0.bias", (w,), init="constant")
        for i in range(1, cfg.ar_layers):
            s.add(f"ar.layer{i}.weight", (k, k, w, w), fan_in=w * (k * k // 2 + 1))
            s.add(f"ar.layer{i}.bias", (w,), init="constant")
        s.add("ar.out.weight", (1, 1, w, 6), gain=0.5)
        s.add("ar.out.bias", (6,), init="constant")
        s.params["ar.out.bias"].data[3:] = INITIAL_SCALE_PARAM
        # The scale heads start at exactly the bias so that the gain does not
        # turn random initial outputs into near-zero scales.
        s.params["ar.out.weight"].data[..., 3:] = 0

        prev = ac
        for i in range(cfg.cond_layers):
            s.add(f"cond.layer{i}.weight", (3, 3, prev, cw))
            s.add(f"cond.layer{i}.bias", (cw,), init="constant")
            prev = cw
        for i in range(cfg.ar_layers):
            s.add(f"cond.inject{i}.weight", (1, 1, cw, w), gain=0.5)
        s.add("cond.inject_out.weight", (1, 1, cw, 6), gain=0.5)
        s.params["cond.inject_out.weight"].data[..., 3:] = 0

        self._first_mask = nn.MaskSpec("A", (k0, k0), in_groups=(0, 1, 2))
        self._hidden_mask = nn.MaskSpec("B", (k, k))
        self._out_mask = nn.MaskSpec("B", (1, 1), out_groups=(0, 1, 2, 0, 1, 2))

    def p(self, name: str) -> Tensor:
        return self.store.params[name]

    def parameter_names(self, prefix: str) -> List[str]:
        return [n for n in self.store if n.startswith(prefix)]

    def _check_images(self, x, channels: int, extents: Tuple[int, int]) -> None:
        shape = tuple(np.shape(x.data if isinstance(x, Tensor) else x))
        if len(shape) != 4 or shape[1] != channels or shape[2:] != tuple(extents):
            raise ShapeMismatch(f"expected images of shape (n, {channels}, {extents[0]}, {extents[1]}), got {shape}")

    # -- encoder -----------------------------------------------------------
    def encode(self, x) -> PosteriorParams:
        cfg, p = self.config, self.p
        self._check_images(x, 3, (cfg.height, cfg.width))
        h = ad.elu(nn.conv2d(to_unit_range(x), p("encoder.conv0.weight"), p("encoder.conv0.bias")))
        for i in range(self._enc_downs):
            h = ad.elu(nn.conv2d(h, p(f"encoder.down{i}.weight"), p(f"encoder.down{i}.bias"), stride=2))
        h = ad.reshape(h, (h.shape[0], -1))
        out = nn.dense(h, p("encoder.head.weight"), p("encoder.head.bias"))
        L = cfg.latent_dim
        return PosteriorParams.from_raw(out[:, :L], out[:, L:])

    # -- factored auxiliary decoder ------------------------------------------
    def aux_decode(self, z) -> AuxDecoderOutput:
        cfg, p = self.config, self.p
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeMismatch(f"latent must have shape (n, {cfg.latent_dim}), got {z.shape}")
        bh, bw = self._dec_base
        h = ad.elu(nn.dense(z, p("aux.fc.weight"), p("aux.fc.bias")))
        h = ad.reshape(h, (z.shape[0], bh, bw, cfg.decoder_width))
        for i in range(self._dec_ups):
            h = ad.upsample_nearest(h, 2)
            h = ad.elu(nn.conv2d(h, p(f"aux.up{i}.weight"), p(f"aux.up{i}.bias")))
        logits = nn.conv2d(h, p("aux.out.weight"), p("aux.out.bias"))
        f_z = _nchw(ad.sigmoid(logits) * PIXEL_RANGE)
        raw_scale = ad.reshape(p("aux.raw_scale") * SCALE_GAIN, (1, -1, 1, 1))
        return AuxDecoderOutput(f_z, raw_scale, cfg.aux_spec.quantization)

    def aux_log_likelihood(self, y, aux: AuxDecoderOutput) -> Tensor:
        """Per-example log p(y | z), a sum of independent per-pixel terms."""
        self._check_images(y, self.config.aux_spec.channels, self.config.aux_extents)
        return ad.sum_(disc_logistic_logprob(y, aux.params), axis=(1, 2, 3))

    def teacher_conditioning(self, y) -> Tensor:
        """Stand-in for f(z) built from ground-truth auxiliary images (bin centres)."""
        c = self.config.aux_spec.quantization.bin_width
        return Tensor(np.asarray(y, dtype=ad.get_default_dtype()) + c / 2)

    # -- conditional autoregressive decoder ------------------------------------
    def conditioning_features(self, f_z) -> Tuple[List[Tensor], Tensor]:
        """Unmasked feature stream from f(z): one injection per masked layer plus the head."""
        cfg, p = self.config, self.p
        f_z = ad.as_tensor(f_z)
        self._check_images(f_z, cfg.aux_spec.channels, cfg.aux_extents)
        factor = (cfg.height // f_z.shape[2], cfg.width // f_z.shape[3])
        h = ad.upsample_nearest(_nhwc(f_z / 128.0 - 1.0), factor)
        stream = []
        for i in range(cfg.cond_layers):
            h = ad.elu(nn.conditioning_conv2d(h, p(f"cond.layer{i}.weight"), p(f"cond.layer{i}.bias"),
                                              target_extents=(cfg.height, cfg.width)))
            stream.append(h)
        injections = [nn.conditioning_conv2d(stream[min(i, len(stream) - 1)], p(f"cond.inject{i}.weight"))
                      for i in range(cfg.ar_layers)]
        head = nn.conditioning_conv2d(stream[-1], p("cond.inject_out.weight"))
        return injections, head

    def _ar_forward(self, x, injections: List[Tensor], head: Tensor) -> DiscretizedLogisticParams:
        cfg, p = self.config, self.p
        h = nn.masked_conv2d(to_unit_range(x), p("ar.layer0.weight"), self._first_mask, p("ar.layer0.bias"))
        h = ad.elu(h + injections[0])
        for i in range(1, cfg.ar_layers):
            pre = nn.masked_conv2d(h, p(f"ar.layer{i}.weight"), self._hidden_mask, p(f"ar.layer{i}.bias"))
            h = h + ad.elu(pre + injections[i])
        out = nn.masked_conv2d(h, p("ar.out.weight"), self._out_mask, p("ar.out.bias")) + head
        out = _nchw(out)
        mu = ad.sigmoid(out[:, :3]) * PIXEL_RANGE
        return DiscretizedLogisticParams(mu, out[:, 3:] * SCALE_GAIN, QuantizationSpec(256))

    def ar_decode(self, x, f_z) -> DiscretizedLogisticParams:
        """Per-sub-pixel logistic parameters given preceding pixels and f(z)."""
        self._check_images(x, 3, (self.config.height, self.config.width))
        injections, head = self.conditioning_features(f_z)
        return self._ar_forward(x, injections, head)

    def primary_log_likelihood(self, x, params: DiscretizedLogisticParams) -> Tensor:
        """Per-example sum of log p(x_i | x_<i, z)."""
        return ad.sum_(disc_logistic_logprob(x, params), axis=(1, 2, 3))

    # -- bound ingredients ------------------------------------------------------
    def log_weights(self, x, noise) -> Tensor:
        """Per-example importance log-weight log p(x, z) - log q(z | x) at z = mean + std * noise."""
        post = self.encode(x)
        z = gaussian_rsample(post, noise)
        aux = self.aux_decode(z)
        log_px = self.primary_log_likelihood(x, self.ar_decode(x, aux.f_z))
        return log_px + standard_normal_log_density(z) - gaussian_log_density(z, post)

    def latent_noise(self, rng: np.random.Generator, count: int, samples: Optional[int] = None) -> np.ndarray:
        shape = (count, self.config.latent_dim) if samples is None else (samples, count, self.config.latent_dim)
        return rng.standard_normal(shape).astype(ad.get_default_dtype())

    def code_length_terms(self, x, y, noise) -> Dict[str, np.ndarray]:
        with ad.no_grad():
            post = self.encode(x)
            z = gaussian_rsample(post, noise)
            aux = self.aux_decode(z)
            return {
                "kl": gaussian_kl(post).data.astype(np.float64),
                "aux_nll": -self.aux_log_likelihood(y, aux).data.astype(np.float64),
                "primary_nll": -self.primary_log_likelihood(x, self.ar_decode(x, aux.f_z)).data.astype(np.float64),
            }

    # -- generation ---------------------------------------------------------------
    def sample(self, z, temperature: float = 1.0, rng: Optional[np.random.Generator] = None,
               uniforms=None) -> Tuple[np.ndarray, np.ndarray]:
        """Draw full images one sub-pixel at a time in raster, then R, G, B order.

        ``uniforms`` (broadcastable to (n, 3, H, W)) replaces random draws; a
        constant 0.5 gives the median path. Returns (aux render, image), both uint8.
        """
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        cfg = self.config
        with ad.no_grad():
            z = ad.as_tensor(z)
            aux = self.aux_decode(z)
            injections, head = self.conditioning_features(aux.f_z)
            n = z.shape[0]
            shape = (n, 3, cfg.height, cfg.width)
            if uniforms is None:
                rng = rng if rng is not None else np.random.default_rng()
                uniforms = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
                uniforms = np.where(uniforms >= 1.0, np.nextafter(1.0, 0.0), uniforms)
            uniforms = np.broadcast_to(np.asarray(uniforms, dtype=np.float64), shape)
            canvas = np.zeros(shape, dtype=ad.get_default_dtype())
            for i in range(cfg.height):
                for j in range(cfg.width):
                    for ch in range(3):
                        params = self._ar_forward(canvas, injections, head)
                        pixel = DiscretizedLogisticParams(params.mu[:, ch, i, j], params.raw_scale[:, ch, i, j],
                                                          params.quantization)
                        canvas[:, ch, i, j] = disc_logistic_sample(pixel, uniforms[:, ch, i, j], temperature)
        return aux.render(), canvas.astype(np.uint8)

    def reconstruct(self, x) -> np.ndarray:
        """Aux render decoded from the posterior mean."""
        with ad.no_grad():
            return self.aux_decode(self.encode(x).mean).render()

    def interpolate(self, x_a, x_b, steps: int, rng: Optional[np.random.Generator] = None,
                    temperature: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
        """Decode evenly spaced points between the posterior means of two images.

        Returns aux renders and one conditional sample per interpolant.
        """
        if steps < 2:
            raise ValueError("interpolation needs at least two steps")
        with ad.no_grad():
            za = self.encode(np.asarray(x_a)[None]).mean.data[0]
            zb = self.encode(np.asarray(x_b)[None]).mean.data[0]
        t = np.linspace(0.0, 1.0, steps, dtype=za.dtype)[:, None]
        z = (1 - t) * za + t * zb
        z[0], z[-1] = za, zb
        return self.sample(z, temperature=temperature, rng=rng)


class FactoredVAE:
    """The encoder and factored decoder of an :class:`AgaveModel` used on their own.

    The auxiliary image must be the full image (256 levels, full resolution,
    colour) so that the factored decoder defines a likelihood for x itself.
    This is the VAE-only baseline; it exposes the same bound hooks as the
    hybrid model.
    """

    def __init__(self, model: AgaveModel):
        cfg = model.config
        if cfg.aux_extents != (cfg.height, cfg.width) or cfg.aux_levels != 256 or cfg.aux_grayscale:
            raise ValueError("a VAE-only model needs the auxiliary image to be the full image")
        self.model = model
        self.config = cfg

    def log_weights(self, x, noise) -> Tensor:
        m = self.model
        post = m.encode(x)
        z = gaussian_rsample(post, noise)
        log_px = m.aux_log_likelihood(x, m.aux_decode(z))
        return log_px + standard_normal_log_density(z) - gaussian_log_density(z, post)

    def latent_noise(self, rng: np.random.Generator, count: int, samples: Optional[int] = None) -> np.ndarray:
        return self.model.latent_noise(rng, count, samples)

    def code_length_terms(self, x, y, noise) -> Dict[str, np.ndarray]:
        with ad.no_grad():
            m = self.model
            post = m.encode(x)
            aux = m.aux_decode(gaussian_rsample(post, noise))
            zeros = np.zeros(len(post.mean.data))
            return {
                "kl": gaussian_kl(post).data.astype(np.float64),
                "aux_nll": -m.aux_log_likelihood(y, aux).data.astype(np.float64),
                "primary_nll": zeros,
            }
