"""Multi-scale bijective flow over (H, W, C) maps with exact log-det accounting.

Each scale squeezes 2x2 spatial blocks into channels, then applies a stack
of flow steps (per-channel affine normalization, an LU-parameterized
invertible channel mix, a convolutional affine coupling). All but the last
scale split half of their channels straight into the latent. The prior over
the latent is a standard normal, so the negative log-likelihood of an
input is (D/2)·log(2π) + ½·Σ z² minus the accumulated log-determinant.

Every sub-bijection reports its own log-det term; the total is their exact
left-to-right sum, which the tests pin against brute-force Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    Param,
    ShapeError,
    StateError,
    Tensor,
    broadcast_to,
    concat,
    conv2d,
    matmul_channels,
    slice_axis,
    squeeze2x2,
    unsqueeze2x2,
)
from . import tenio

__all__ = [
    "LOG_2PI",
    "DegenerateBatchError",
    "ActNorm",
    "Invertible1x1",
    "AffineCoupling",
    "FlowStep",
    "Latent",
    "FlowModel",
    "save_flow_checkpoint",
    "load_flow_checkpoint",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class DegenerateBatchError(ValueError):
    """A statistics batch cannot support data-dependent initialization."""


class ActNorm:
    """Per-channel affine map y = exp(log_scale)·x + bias.

    Parameters start unset; :meth:`initialize_from` fits them so the first
    batch comes out zero-mean unit-variance per channel. Using the layer
    before that is a state error. log-det is H·W·Σ log_scale, exact.
    """

    def __init__(self, channels: int, name: str) -> None:
        self.name = name
        self.channels = channels
        self.log_scale = Param(np.zeros(channels), f"{name}.log_scale")
        self.bias = Param(np.zeros(channels), f"{name}.bias")
        self.initialized = False

    def params(self) -> list[Param]:
        return [self.log_scale, self.bias]

    def initialize_from(self, batch: np.ndarray) -> None:
        """Fit scale/bias to standardize ``batch`` (N, H, W, C) per channel."""
        if self.initialized:
            raise StateError(f"{self.name}: already initialized")
        if batch.ndim != 4 or batch.shape[0] < 2:
            raise DegenerateBatchError(
                f"{self.name}: initialization needs a (N>=2, H, W, C) batch"
            )
        flat = batch.reshape(-1, batch.shape[3])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        dead = std == 0.0
        if dead.any():
            ch = int(np.argwhere(dead)[0][0])
            raise DegenerateBatchError(
                f"{self.name}: zero variance in channel {ch} of the init batch"
            )
        self.log_scale.assign(-np.log(std))
        self.bias.assign(-mean / std)
        self.initialized = True

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise StateError(f"{self.name}: forward before initialization")
        h, w, _ = x.shape
        scale = self.log_scale.value.exp()
        y = x * broadcast_to(scale, x.shape) + broadcast_to(self.bias.value, x.shape)
        logdet = self.log_scale.value.sum() * float(h * w)
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        if not self.initialized:
            raise StateError(f"{self.name}: inverse before initialization")
        scale = self.log_scale.value.exp()
        return (y - broadcast_to(self.bias.value, y.shape)) / broadcast_to(scale, y.shape)


class Invertible1x1:
    """Per-pixel channel mix x -> W·x with W = P·L·(U + diag(sign·exp(log_diag))).

    P is a fixed permutation, L unit lower-triangular, U strictly upper;
    only the L/U/log_diag entries train, so W stays invertible by
    construction and the log-det is the O(C) sum H·W·Σ log_diag. At init
    L = I, U = 0, log_diag = 0, which makes W exactly the permutation and
    the log-det exactly zero.
    """

    def __init__(self, channels: int, name: str, rng: np.random.Generator | None = None) -> None:
        self.name = name
        self.channels = channels
        perm = np.arange(channels) if rng is None else rng.permutation(channels)
        self.set_permutation(perm)
        self.lower = Param(np.zeros((channels, channels)), f"{name}.lower")
        self.upper = Param(np.zeros((channels, channels)), f"{name}.upper")
        self.log_diag = Param(np.zeros(channels), f"{name}.log_diag")
        self.diag_sign = np.ones(channels)
        c = channels
        self._mask_l = np.tril(np.ones((c, c)), -1)
        self._mask_u = np.triu(np.ones((c, c)), 1)
        self._eye = np.eye(c)

    def set_permutation(self, perm: np.ndarray) -> None:
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.channels)):
            raise ValueError(f"{self.name}: not a permutation of 0..{self.channels - 1}")
        self.perm = perm
        # row i of P is e_{perm[i]}, so (P v)[i] = v[perm[i]]
        self._pmat = np.eye(self.channels)[perm]

    def params(self) -> list[Param]:
        return [self.lower, self.upper, self.log_diag]

    def _factors(self) -> tuple[Tensor, Tensor]:
        c = self.channels
        lmat = self.lower.value * Tensor(self._mask_l) + Tensor(self._eye)
        d = self.log_diag.value.exp() * Tensor(self.diag_sign)
        umat = self.upper.value * Tensor(self._mask_u) + Tensor(self._eye) * broadcast_to(d, (c, c))
        return lmat, umat

    def weight(self) -> np.ndarray:
        """Reconstruct the dense W (inference helper, numpy only)."""
        lmat, umat = self._factors()
        return self._pmat @ lmat.data @ umat.data

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h, w, _ = x.shape
        lmat, umat = self._factors()
        y = matmul_channels(Tensor(self._pmat), matmul_channels(lmat, matmul_channels(umat, x)))
        logdet = self.log_diag.value.sum() * float(h * w)
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        h, w, c = y.shape
        wmat = self.weight()
        flat = np.linalg.solve(wmat, y.data.reshape(-1, c).T).T
        return Tensor(flat.reshape(h, w, c))


class AffineCoupling:
    """Affine half-coupling: the first channel half drives a scale/shift of
    the second through a two-layer 3x3 conv net (tanh in between).

    The raw scale goes through scale_cap·tanh(·), bounding |log scale| by
    scale_cap. The closing conv starts at zero, so the layer is the
    identity at init and the whole flow starts as a permutation.
    """

    def __init__(
        self,
        channels: int,
        hidden_width: int,
        scale_cap: float,
        name: str,
        rng: np.random.Generator,
    ) -> None:
        if channels < 2:
            raise ShapeError(f"{name}: coupling needs at least 2 channels")
        self.name = name
        self.channels = channels
        self.split = channels // 2
        keep = channels - self.split
        self.scale_cap = float(scale_cap)
        k0 = rng.normal(0.0, (9 * self.split) ** -0.5, size=(3, 3, self.split, hidden_width))
        self.conv0_kernel = Param(k0, f"{name}.conv0_kernel")
        self.conv0_bias = Param(np.zeros(hidden_width), f"{name}.conv0_bias")
        self.conv1_kernel = Param(np.zeros((3, 3, hidden_width, 2 * keep)), f"{name}.conv1_kernel")
        self.conv1_bias = Param(np.zeros(2 * keep), f"{name}.conv1_bias")

    def params(self) -> list[Param]:
        return [self.conv0_kernel, self.conv0_bias, self.conv1_kernel, self.conv1_bias]

    def _scale_shift(self, frozen: Tensor) -> tuple[Tensor, Tensor]:
        keep = self.channels - self.split
        h = conv2d(frozen, self.conv0_kernel.value, self.conv0_bias.value).tanh()
        o = conv2d(h, self.conv1_kernel.value, self.conv1_bias.value)
        s = slice_axis(o, 2, 0, keep).tanh() * self.scale_cap
        t = slice_axis(o, 2, keep, 2 * keep)
        return s, t

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        c = x.shape[2]
        if c != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {c}")
        x1 = slice_axis(x, 2, 0, self.split)
        x2 = slice_axis(x, 2, self.split, c)
        s, t = self._scale_shift(x1)
        y2 = x2 * s.exp() + t
        return concat((x1, y2), 2), s.sum()

    def inverse(self, y: Tensor) -> Tensor:
        c = y.shape[2]
        y1 = slice_axis(y, 2, 0, self.split)
        y2 = slice_axis(y, 2, self.split, c)
        s, t = self._scale_shift(y1)
        x2 = (y2 - t) * (-s).exp()
        return concat((y1, x2), 2)


class FlowStep:
    """One flow step: ActNorm, then channel mix, then coupling."""

    def __init__(self, norm: ActNorm, mix: Invertible1x1, couple: AffineCoupling) -> None:
        self.norm = norm
        self.mix = mix
        self.couple = couple

    def layers(self):
        return (self.norm, self.mix, self.couple)

    def params(self) -> list[Param]:
        return self.norm.params() + self.mix.params() + self.couple.params()


@dataclass
class Latent:
    """Latent pieces: one per split scale plus the final scale output."""

    parts: list[Tensor]

    def total_dim(self) -> int:
        return sum(p.size for p in self.parts)

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parts])


class _Scale:
    def __init__(self, steps: list[FlowStep], split_channels: int) -> None:
        self.steps = steps
        self.split_channels = split_channels  # 0 on the last scale


class FlowModel:
    """Squeeze / flow-steps / split pyramid bound to a fixed input shape."""

    def __init__(
        self,
        height: int = 32,
        width: int = 32,
        in_channels: int = 6,
        num_scales: int = 2,
        steps_per_scale: int = 4,
        hidden_width: int = 32,
        scale_cap: float = 2.0,
        seed: int = 0,
        identity_init: bool = False,
    ) -> None:
        if num_scales < 1 or steps_per_scale < 1:
            raise ValueError("num_scales and steps_per_scale must be >= 1")
        if height % (2**num_scales) or width % (2**num_scales):
            raise ShapeError(
                f"spatial dims {height}x{width} not divisible by 2^{num_scales}"
            )
        self.height = height
        self.width = width
        self.in_channels = in_channels
        self.num_scales = num_scales
        self.steps_per_scale = steps_per_scale
        self.hidden_width = hidden_width
        self.scale_cap = float(scale_cap)
        self.seed = seed
        self.identity_init = identity_init

        rng = np.random.default_rng(seed)
        self.scales: list[_Scale] = []
        self.latent_shapes: list[tuple[int, int, int]] = []
        h, w, c = height, width, in_channels
        for si in range(num_scales):
            h, w, c = h // 2, w // 2, c * 4
            steps = []
            for ti in range(steps_per_scale):
                tag = f"{si}.{ti}"
                norm = ActNorm(c, f"{tag}.actnorm")
                mix = Invertible1x1(c, f"{tag}.inv1x1", rng=None if identity_init else rng)
                couple = AffineCoupling(c, hidden_width, scale_cap, f"{tag}.coupling", rng)
                if identity_init:
                    norm.initialized = True  # identity affine, anchor-exact
                steps.append(FlowStep(norm, mix, couple))
            last = si == num_scales - 1
            split_channels = 0 if last else c // 2
            self.scales.append(_Scale(steps, split_channels))
            if last:
                self.latent_shapes.append((h, w, c))
            else:
                self.latent_shapes.append((h, w, split_channels))
                c -= split_channels

    # -- structure ------------------------------------------------------

    def params(self) -> list[Param]:
        out: list[Param] = []
        for scale in self.scales:
            for step in scale.steps:
                out.extend(step.params())
        return out

    def actnorms(self) -> list[ActNorm]:
        return [step.norm for scale in self.scales for step in scale.steps]

    @property
    def actnorms_initialized(self) -> bool:
        return all(a.initialized for a in self.actnorms())

    def total_dim(self) -> int:
        return self.height * self.width * self.in_channels

    def _check_input(self, x: Tensor) -> None:
        want = (self.height, self.width, self.in_channels)
        if x.shape != want:
            raise ShapeError(f"flow input shape {x.shape} != {want}")

    # -- bijection --------------------------------------------------------

    def forward(self, y: Tensor) -> tuple[Latent, Tensor]:
        z, logdet, _ = self.forward_trace(y)
        return z, logdet

    def forward_trace(self, y: Tensor) -> tuple[Latent, Tensor, list[Tensor]]:
        """Forward pass that also reports each sub-bijection's log-det term.

        The returned total is the exact left-to-right sum of the trace, so
        additivity holds bitwise.
        """
        self._check_input(y)
        x = y
        trace: list[Tensor] = []
        logdet = Tensor(0.0)
        parts: list[Tensor] = []
        for scale in self.scales:
            x = squeeze2x2(x)
            for step in scale.steps:
                for layer in step.layers():
                    x, ld = layer.forward(x)
                    trace.append(ld)
                    logdet = logdet + ld
            if scale.split_channels:
                cz = scale.split_channels
                parts.append(slice_axis(x, 2, 0, cz))
                x = slice_axis(x, 2, cz, x.shape[2])
        parts.append(x)
        return Latent(parts), logdet, trace

    def inverse(self, z) -> Tensor:
        """Map a latent (Latent or list of arrays/Tensors) back to input space."""
        parts = list(z.parts) if isinstance(z, Latent) else list(z)
        parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
        if len(parts) != len(self.latent_shapes):
            raise ShapeError(
                f"latent has {len(parts)} parts, model expects {len(self.latent_shapes)}"
            )
        for p, shape in zip(parts, self.latent_shapes):
            if p.shape != shape:
                raise ShapeError(f"latent part shape {p.shape} != {shape}")
        x = parts[-1]
        for si in reversed(range(self.num_scales)):
            scale = self.scales[si]
            if scale.split_channels:
                x = concat((parts[si], x), 2)
            for step in reversed(scale.steps):
                x = step.couple.inverse(x)
                x = step.mix.inverse(x)
                x = step.norm.inverse(x)
            x = unsqueeze2x2(x)
        return x

    # -- density ----------------------------------------------------------

    def nll(self, y: Tensor) -> Tensor:
        """Negative log-likelihood under the standard-normal prior."""
        z, logdet = self.forward(y)
        d = z.total_dim()
        ss = None
        for p in z.parts:
            sp = (p * p).sum()
            ss = sp if ss is None else ss + sp
        return (0.5 * d) * LOG_2PI + 0.5 * ss - logdet

    def sample(self, seed: int, temperature: float = 1.0) -> Tensor:
        """Draw z ~ Normal(0, T²·I) with a seeded generator and invert."""
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        rng = np.random.default_rng(seed)
        parts = [Tensor(rng.standard_normal(s) * temperature) for s in self.latent_shapes]
        return self.inverse(parts)

    # -- data-dependent init -----------------------------------------------

    def initialize_actnorms(self, batch: np.ndarray) -> None:
        """Initialize every ActNorm front-to-back on ``batch`` (N, H, W, C).

        Each layer sees the batch as transformed by everything before it,
        so it standardizes its true input distribution.
        """
        if batch.ndim != 4 or batch.shape[0] < 2:
            raise DegenerateBatchError("actnorm init needs a (N>=2, H, W, C) batch")
        xs = [Tensor(np.asarray(b, dtype=np.float64)) for b in batch]
        for x in xs:
            self._check_input(x)
        for scale in self.scales:
            xs = [squeeze2x2(x) for x in xs]
            for step in scale.steps:
                step.norm.initialize_from(np.stack([x.data for x in xs]))
                xs = [step.norm.forward(x)[0] for x in xs]
                xs = [step.mix.forward(x)[0] for x in xs]
                xs = [step.couple.forward(x)[0] for x in xs]
            if scale.split_channels:
                xs = [slice_axis(x, 2, scale.split_channels, x.shape[2]) for x in xs]


# -- checkpoints ------------------------------------------------------------


def _topology(model: FlowModel) -> dict:
    return {
        "height": model.height,
        "width": model.width,
        "in_channels": model.in_channels,
        "num_scales": model.num_scales,
        "steps_per_scale": model.steps_per_scale,
        "hidden_width": model.hidden_width,
        "scale_cap": model.scale_cap,
    }


def save_flow_checkpoint(model: FlowModel, out_dir, config_hash: str = "") -> Path:
    """Write params as float32 BTEN files plus a hashed manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}

    def put(name: str, arr: np.ndarray) -> None:
        tenio.write_tensor(out_dir / name, arr)
        files[name] = tenio.sha256_file(out_dir / name)

    for si, scale in enumerate(model.scales):
        for ti, step in enumerate(scale.steps):
            tag = f"{si}.{ti}"
            put(f"{tag}.actnorm.log_scale.ten", step.norm.log_scale.value.data.astype(np.float32))
            put(f"{tag}.actnorm.bias.ten", step.norm.bias.value.data.astype(np.float32))
            put(f"{tag}.inv1x1.lower.ten", step.mix.lower.value.data.astype(np.float32))
            put(f"{tag}.inv1x1.upper.ten", step.mix.upper.value.data.astype(np.float32))
            put(f"{tag}.inv1x1.log_diag.ten", step.mix.log_diag.value.data.astype(np.float32))
            put(f"{tag}.inv1x1.perm.ten", step.mix.perm.astype(np.uint8))
            put(f"{tag}.inv1x1.diag_sign.ten", step.mix.diag_sign.astype(np.float32))
            put(f"{tag}.coupling.conv0_kernel.ten", step.couple.conv0_kernel.value.data.astype(np.float32))
            put(f"{tag}.coupling.conv0_bias.ten", step.couple.conv0_bias.value.data.astype(np.float32))
            put(f"{tag}.coupling.conv1_kernel.ten", step.couple.conv1_kernel.value.data.astype(np.float32))
            put(f"{tag}.coupling.conv1_bias.ten", step.couple.conv1_bias.value.data.astype(np.float32))
    manifest = {
        "kind": "flow_checkpoint",
        "topology": _topology(model),
        "actnorm_initialized": [a.initialized for a in model.actnorms()],
        "config_hash": config_hash,
        "files": files,
    }
    tenio.write_manifest(out_dir / "manifest.json", manifest)
    return out_dir


def load_flow_checkpoint(ckpt_dir) -> FlowModel:
    """Rebuild a FlowModel from a checkpoint directory, verifying hashes."""
    ckpt_dir = Path(ckpt_dir)
    manifest = tenio.read_manifest(ckpt_dir / "manifest.json")
    if manifest.get("kind") != "flow_checkpoint":
        raise tenio.DataIntegrityError(f"{ckpt_dir}: not a flow checkpoint")
    topo = manifest["topology"]
    model = FlowModel(
        height=topo["height"],
        width=topo["width"],
        in_channels=topo["in_channels"],
        num_scales=topo["num_scales"],
        steps_per_scale=topo["steps_per_scale"],
        hidden_width=topo["hidden_width"],
        scale_cap=topo["scale_cap"],
        identity_init=True,
    )

    def get(name: str) -> np.ndarray:
        path = ckpt_dir / name
        want = manifest["files"].get(name)
        if want is None:
            raise tenio.DataIntegrityError(f"{ckpt_dir}: {name} not in manifest")
        got = tenio.sha256_file(path) if path.exists() else None
        if got != want:
            raise tenio.DataIntegrityError(f"{ckpt_dir}: {name} missing or hash mismatch")
        return tenio.read_tensor(path)

    flags = manifest["actnorm_initialized"]
    k = 0
    for si, scale in enumerate(model.scales):
        for ti, step in enumerate(scale.steps):
            tag = f"{si}.{ti}"
            step.norm.log_scale.assign(get(f"{tag}.actnorm.log_scale.ten").astype(np.float64))
            step.norm.bias.assign(get(f"{tag}.actnorm.bias.ten").astype(np.float64))
            step.norm.initialized = bool(flags[k])
            k += 1
            step.mix.lower.assign(get(f"{tag}.inv1x1.lower.ten").astype(np.float64))
            step.mix.upper.assign(get(f"{tag}.inv1x1.upper.ten").astype(np.float64))
            step.mix.log_diag.assign(get(f"{tag}.inv1x1.log_diag.ten").astype(np.float64))
            step.mix.set_permutation(get(f"{tag}.inv1x1.perm.ten").astype(np.int64))
            step.mix.diag_sign = get(f"{tag}.inv1x1.diag_sign.ten").astype(np.float64)
            step.couple.conv0_kernel.assign(get(f"{tag}.coupling.conv0_kernel.ten").astype(np.float64))
            step.couple.conv0_bias.assign(get(f"{tag}.coupling.conv0_bias.ten").astype(np.float64))
            step.couple.conv1_kernel.assign(get(f"{tag}.coupling.conv1_kernel.ten").astype(np.float64))
            step.couple.conv1_bias.assign(get(f"{tag}.coupling.conv1_bias.ten").astype(np.float64))
    return model
