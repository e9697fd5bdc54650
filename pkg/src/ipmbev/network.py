"""The three-branch BEV segmentation network.

* principal branch: a U-Net of VM blocks over the IPM image,
* perspective branch: a factorized-convolution encoder/decoder per camera whose
  deep features are IPM-warped to a coarse BEV grid and whose road map feeds
  the cross-view loss,
* prior branch: a strided-conv encoder of the rasterized OSM centerlines,

merged at the bottleneck before decoding to per-class logits. Camera geometry
enters only through :func:`build_luts`; the forward pass reads tables, never
the rig.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import apply_batch
from .geometry import CameraRig, GridSpec
from .ipm import IpmLut, build_ipm_lut, visibility_mask, warp_tensor
from .ssm import VMBlock
from .tensorcore import BatchNorm2d, Conv2d, Module, Tensor
from .tensorcore import functional as F


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class ModelConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    image_size: tuple[int, int] = (352, 128)
    feat_resolution: float = 0.6
    channels: tuple[int, ...] = (32, 64, 96, 128, 160)
    depth: int = 2
    merge_channels: int = 160
    pv_channels: tuple[int, int, int] = (16, 32, 64)
    pv_units: int = 1
    prior_channels: tuple[int, ...] = (8, 16, 32)
    d_state: int = 8
    expand: int = 2
    num_classes: int = 4
    ipm_height: float = 0.0
    tied_scans: bool = False

    def __post_init__(self):
        def bad(path, msg):
            raise ConfigError(f"{path}: {msg}")
        if len(self.channels) < 3:
            bad("channels", "need at least 3 encoder stages")
        if any(c <= 0 for c in self.channels):
            bad("channels", "must be positive")
        if self.merge_channels != self.channels[-1]:
            bad("merge_channels", f"must equal channels[-1]={self.channels[-1]} so merge intermediates match F_en")
        if self.depth < 1:
            bad("depth", "must be >= 1")
        if len(self.pv_channels) != 3:
            bad("pv_channels", "need 3 entries (strides 2, 4, 8)")
        w, h = self.image_size
        if w % 8 or h % 8:
            bad("image_size", f"{self.image_size} must be divisible by 8")
        if len(self.prior_channels) != 3:
            bad("prior_channels", "need 3 entries for the three stride-2 convolutions")
        if self.num_classes < 2:
            bad("num_classes", "must be >= 2")
        try:
            self.feat_grid
        except ValueError as e:
            bad("feat_resolution", str(e))

    # -- derived geometry ------------------------------------------------------
    @property
    def n_stages(self) -> int:
        return len(self.channels)

    @property
    def stride(self) -> int:
        return 2 ** self.n_stages

    @property
    def padded_shape(self) -> tuple[int, int]:
        H, W = self.grid.shape
        s = self.stride
        return (-(-H // s) * s, -(-W // s) * s)

    @property
    def pad(self) -> tuple[int, int, int, int]:
        """``(top, bottom, left, right)``; odd remainders go to the end."""
        (H, W), (Hp, Wp) = self.grid.shape, self.padded_shape
        t, l = (Hp - H) // 2, (Wp - W) // 2
        return (t, Hp - H - t, l, Wp - W - l)

    @property
    def bottleneck_shape(self) -> tuple[int, int]:
        Hp, Wp = self.padded_shape
        return (Hp // self.stride, Wp // self.stride)

    @property
    def feat_grid(self) -> GridSpec:
        return self.grid.with_resolution(self.feat_resolution)

    @property
    def feat_image_size(self) -> tuple[int, int]:
        return (self.image_size[0] // 8, self.image_size[1] // 8)

    @property
    def pv_pool_steps(self) -> int:
        """Number of 2x poolings taking the feature grid to at most the bottleneck size."""
        (h, w), (bh, bw) = self.feat_grid.shape, self.bottleneck_shape
        n = 0
        while h > bh or w > bw:
            h, w, n = h // 2, w // 2, n + 1
        return n

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        if not isinstance(d, dict):
            raise ConfigError("model: expected a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"model.{sorted(unknown)[0]}: unknown field")
        kw = {}
        for k, v in d.items():
            if k == "grid":
                try:
                    kw[k] = GridSpec.from_dict(v)
                except (TypeError, ValueError, KeyError) as e:
                    raise ConfigError(f"model.grid: {e}") from None
            elif isinstance(v, list):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        try:
            return cls(**kw)
        except ConfigError as e:
            raise ConfigError(f"model.{e}") from None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from None

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_config() -> ModelConfig:
    return ModelConfig()


def reduced_config() -> ModelConfig:
    """56x104 padded BEV grid at 0.6 m, 64x176 images: trainable on a CPU."""
    return ModelConfig(grid=GridSpec(resolution=0.6), image_size=(176, 64), feat_resolution=1.2,
                       channels=(16, 32, 48), depth=1, merge_channels=48, pv_channels=(8, 16, 24),
                       prior_channels=(8, 16, 32))


def tiny_config() -> ModelConfig:
    """Reduced grid with narrow channels, for finite-difference checks."""
    return ModelConfig(grid=GridSpec(resolution=0.6), image_size=(176, 64), feat_resolution=1.2,
                       channels=(4, 4, 6), depth=1, merge_channels=6, pv_channels=(3, 3, 4),
                       prior_channels=(2, 2, 3), d_state=2, expand=1)


PRESETS = {"default": default_config, "reduced": reduced_config, "tiny": tiny_config}


def make_config(name_or_path: str) -> ModelConfig:
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    return ModelConfig.load(name_or_path)


# -- building blocks ---------------------------------------------------------------

class ConvBlock(Module):
    """``conv -> ReLU [-> BN]``."""

    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, norm=False, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, kernel, stride, padding, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype) if norm else None

    def __call__(self, x):
        y = F.relu(self.conv(x))
        return self.bn(y) if self.bn is not None else y


class FactorizedUnit(Module):
    """Residual unit of 3x1 and 1x3 convolutions."""

    def __init__(self, rng, c, dtype=np.float32):
        super().__init__()
        self.c31 = Conv2d(rng, c, c, (3, 1), padding=(1, 0), dtype=dtype)
        self.c13 = Conv2d(rng, c, c, (1, 3), padding=(0, 1), dtype=dtype)
        self.bn = BatchNorm2d(c, dtype=dtype)

    def __call__(self, x):
        y = self.bn(self.c13(F.relu(self.c31(x))))
        return F.relu(y + x)


class PerspectiveBranch(Module):
    """Shared-weight per-camera encoder (stride 8 features) and road-map decoder."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        c1, c2, c3 = cfg.pv_channels
        self.down = [ConvBlock(rng, ci, co, 3, 2, 1, norm=True, dtype=dtype)
                     for ci, co in ((3, c1), (c1, c2), (c2, c3))]
        self.units = [[FactorizedUnit(rng, c, dtype) for _ in range(cfg.pv_units)] for c in (c1, c2, c3)]
        self.up = [Conv2d(rng, c3, c2, 3, padding=1, dtype=dtype), Conv2d(rng, c2, c1, 3, padding=1, dtype=dtype)]
        self.head = Conv2d(rng, c1, 1, 3, padding=1, dtype=dtype)

    def __call__(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """``(N, 3, h, w)`` -> (features ``(N, c3, h/8, w/8)``, road logits ``(N, 1, h, w)``)."""
        x = images
        for down, units in zip(self.down, self.units):
            x = down(x)
            for u in units:
                x = u(x)
        f_pv = x
        for conv in self.up:
            x = F.relu(conv(F.upsample_nearest(x, 2)))
        return f_pv, self.head(F.upsample_nearest(x, 2))


class PriorEncoder(Module):
    """Three stride-2 4x4 convolutions + BN, then (n_stages - 3) more and a 3x3 conv + BN."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        p1, p2, p3 = cfg.prior_channels
        self.d8 = [Conv2d(rng, ci, co, 4, 2, 1, dtype=dtype) for ci, co in ((1, p1), (p1, p2), (p2, p3))]
        self.bn8 = BatchNorm2d(p3, dtype=dtype)
        extra = cfg.n_stages - 3
        cs = [p3] + [cfg.channels[min(3 + k, cfg.n_stages - 1)] for k in range(extra)]
        self.d4 = [Conv2d(rng, cs[k], cs[k + 1], 4, 2, 1, dtype=dtype) for k in range(extra)]
        self.c311 = Conv2d(rng, cs[-1], cfg.channels[-1], 3, 1, 1, dtype=dtype)
        self.bn4 = BatchNorm2d(cfg.channels[-1], dtype=dtype)

    def __call__(self, m_o_padded: Tensor) -> Tensor:
        x = m_o_padded
        for conv in self.d8:
            x = F.relu(conv(x))
        x = self.bn8(x)
        for conv in self.d4:
            x = F.relu(conv(x))
        return self.bn4(F.relu(self.c311(x)))


class PrincipalEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        ch = cfg.channels
        vm = dict(depth=cfg.depth, d_state=cfg.d_state, expand=cfg.expand, tied=cfg.tied_scans, dtype=dtype)
        self.padded_shape = cfg.padded_shape
        self.stem = Conv2d(rng, 3, ch[0], 3, 1, 1, dtype=dtype)
        self.downs = [Conv2d(rng, ch[max(s - 1, 0)], ch[s], 4, 2, 1, dtype=dtype) for s in range(len(ch))]
        self.stages = [VMBlock(rng, ch[s], **vm) for s in range(len(ch))]

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Padded IPM image -> (bottleneck, skips from full resolution downwards)."""
        if tuple(x.shape[-2:]) != self.padded_shape:
            Hp, Wp = self.padded_shape
            raise ValueError(f"principal encoder needs input padded to {Hp}x{Wp}, got {x.shape[-2]}x{x.shape[-1]}")
        x = F.relu(self.stem(x))
        skips = [x]
        for down, stage in zip(self.downs, self.stages):
            x = stage(down(x))
            skips.append(x)
        return skips.pop(), skips


class ConvBN1x1(Module):
    """1x1 conv, ReLU, BN."""

    def __init__(self, rng, c_in, c_out, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, 1, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x):
        return self.bn(F.relu(self.conv(x)))


class TriMerge(Module):
    """Fuse the principal bottleneck with the prior features and pooled perspective BEV features."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        C = cfg.channels[-1]
        c_pv = cfg.pv_channels[-1]
        self.shallow = ConvBN1x1(rng, C, cfg.merge_channels, dtype)
        self.ld = [Conv2d(rng, c_pv, c_pv, 3, 1, 1, dtype=dtype) for _ in range(cfg.pv_pool_steps)]
        self.bottleneck = cfg.bottleneck_shape
        self.deep = ConvBN1x1(rng, cfg.merge_channels + c_pv, cfg.merge_channels, dtype)

    def pool_pv(self, f_pv_bev: Tensor) -> Tensor:
        x = f_pv_bev
        for conv in self.ld:
            x = F.relu(conv(F.avg_pool(x, 2)))
        (h, w), (bh, bw) = x.shape[-2:], self.bottleneck
        if h > bh or w > bw:
            raise ValueError(f"pooled perspective features {h}x{w} exceed bottleneck {bh}x{bw}")
        t, l = (bh - h) // 2, (bw - w) // 2
        return F.pad2d(x, (t, bh - h - t, l, bw - w - l))

    def __call__(self, f_en, f_o, f_pv_bev, trace: dict | None = None):
        if f_en.shape != f_o.shape:
            raise ValueError(f"F_en {f_en.shape} and F_o {f_o.shape} differ")
        f_ms = self.shallow(f_en + f_o)
        pv = self.pool_pv(f_pv_bev)
        if pv.shape[-2:] != f_ms.shape[-2:]:
            raise ValueError(f"padded perspective features {pv.shape} do not match {f_ms.shape}")
        f_me = self.deep(F.concat([f_ms, pv], axis=1))
        if trace is not None:
            trace.update(F_ms=f_ms, F_pv_pooled=pv)
        return f_me


class PrincipalDecoder(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        ch = cfg.channels
        vm = dict(depth=cfg.depth, d_state=cfg.d_state, expand=cfg.expand, tied=cfg.tied_scans, dtype=dtype)
        n = len(ch)
        c_prev = [cfg.merge_channels] + [ch[s] for s in range(n - 2, 0, -1)]
        self.fuse = [Conv2d(rng, cp + ch[s], ch[s], 1, dtype=dtype) for cp, s in zip(c_prev, range(n - 2, -1, -1))]
        self.stages = [VMBlock(rng, ch[s], **vm) for s in range(n - 2, -1, -1)]
        self.final = Conv2d(rng, ch[0] + ch[0], ch[0], 3, 1, 1, dtype=dtype)
        self.head = Conv2d(rng, ch[0], cfg.num_classes, 1, dtype=dtype)
        self.pad = cfg.pad

    def __call__(self, f_me, skips):
        """Skips ordered from full resolution (stem) downwards."""
        x = f_me
        for fuse, stage, skip in zip(self.fuse, self.stages, reversed(skips[1:])):
            x = stage(fuse(F.concat([F.upsample_nearest(x, 2), skip], axis=1)))
        f_de = F.relu(self.final(F.concat([F.upsample_nearest(x, 2), skips[0]], axis=1)))
        logits = self.head(f_de)
        return F.crop2d(f_de, self.pad), F.crop2d(logits, self.pad)


# -- LUTs and the full model -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LutBundle:
    """Everything the network needs from camera geometry."""

    lut_img: IpmLut   # full BEV grid <- camera images (and perspective road maps)
    lut_feat: IpmLut  # coarse feature grid <- stride-8 perspective features

    @property
    def mask(self) -> np.ndarray:
        return visibility_mask(self.lut_img).data[0]

    @property
    def n_cams(self) -> int:
        return self.lut_img.n_cams


def build_luts(rig: CameraRig, cfg: ModelConfig) -> LutBundle:
    return LutBundle(build_ipm_lut(cfg.grid, rig, cfg.ipm_height, cfg.image_size),
                     build_ipm_lut(cfg.feat_grid, rig, cfg.ipm_height, cfg.feat_image_size))


@dataclass
class BranchFeatures:
    ipm_image: Tensor
    F_en: Tensor
    F_pv: Tensor
    M_pv_logits: Tensor
    M_pv: Tensor
    F_pv_bev: Tensor
    F_o: Tensor
    F_ms: Tensor
    F_pv_pooled: Tensor
    F_me: Tensor
    F_de: Tensor
    M_bev_logits: Tensor
    M_hat_pv: Tensor
    mask: np.ndarray
    labels: np.ndarray | None = None


class BevNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = PrincipalEncoder(rng, cfg, dtype)
        self.perspective = PerspectiveBranch(rng, cfg, dtype)
        self.prior = PriorEncoder(rng, cfg, dtype)
        self.merge = TriMerge(rng, cfg, dtype)
        self.decoder = PrincipalDecoder(rng, cfg, dtype)

    def forward_full(self, images, luts: LutBundle, m_o, aug=None, labels=None) -> BranchFeatures:
        """Run every branch.

        ``images (B, n_cams, 3, h, w)``, ``m_o (B, 1, H, W)`` rasterized OSM,
        ``aug`` one :class:`AugSpec` per batch item (or None), ``labels``
        optional ``(B, H, W)`` class ids transformed alongside the inputs.
        All BEV outputs live in the augmented frame.
        """
        cfg = self.cfg
        dt = self.dtype
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=dt))
        B, n, C3, h, w = images.shape
        if (w, h) != cfg.image_size or n != luts.n_cams:
            raise ValueError(f"images {images.shape} do not match config size {cfg.image_size} "
                             f"and {luts.n_cams} table cameras")
        m_o = m_o if isinstance(m_o, Tensor) else Tensor(np.asarray(m_o, dtype=dt))

        ipm_image = warp_tensor(images, luts.lut_img, "bilinear", "mean")
        f_pv, pv_logits = self.perspective(images.reshape(B * n, C3, h, w))
        m_pv = F.sigmoid(pv_logits).reshape(B, n, 1, h, w)
        f_pv_bev = warp_tensor(f_pv.reshape((B, n) + f_pv.shape[1:]), luts.lut_feat, "bilinear", "mean")
        m_hat_pv = warp_tensor(m_pv, luts.lut_img, "bilinear", "mean")[:, 0]
        mask = np.broadcast_to(luts.mask, (B,) + cfg.grid.shape)

        ipm_image = apply_batch(aug, ipm_image)
        f_pv_bev = apply_batch(aug, f_pv_bev)
        m_o = apply_batch(aug, m_o)
        m_hat_pv = apply_batch(aug, m_hat_pv)
        mask = apply_batch(aug, mask)
        if labels is not None:
            labels = apply_batch(aug, np.asarray(labels))

        f_en, skips = self.encoder(F.pad2d(ipm_image, cfg.pad))
        f_o = self.prior(F.pad2d(m_o, cfg.pad))
        trace: dict = {}
        f_me = self.merge(f_en, f_o, f_pv_bev, trace)
        f_de, logits = self.decoder(f_me, skips)
        return BranchFeatures(ipm_image, f_en, f_pv, pv_logits, m_pv, f_pv_bev, f_o, trace["F_ms"],
                              trace["F_pv_pooled"], f_me, f_de, logits, m_hat_pv, np.asarray(mask), labels)

    def predict(self, images, luts: LutBundle, m_o) -> np.ndarray:
        """Argmax class map ``(B, H, W)`` without augmentation and without a tape."""
        from .tensorcore import no_grad
        was = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward_full(images, luts, m_o)
        finally:
            self.train(was)
        return out.M_bev_logits.data.argmax(axis=1)


def count_parameters(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters().values()))


def shape_ledger(cfg: ModelConfig, n_cams: int, batch: int = 1) -> dict[str, tuple]:
    """Expected shape of every named pipeline arrow."""
    H, W = cfg.grid.shape
    Hp, Wp = cfg.padded_shape
    bh, bw = cfg.bottleneck_shape
    w, h = cfg.image_size
    fh, fw = cfg.feat_grid.shape
    C = cfg.channels[-1]
    c_pv = cfg.pv_channels[-1]
    return {
        "ipm_image": (batch, 3, H, W),
        "F_en": (batch, C, bh, bw),
        "F_pv": (batch * n_cams, c_pv, h // 8, w // 8),
        "M_pv_logits": (batch * n_cams, 1, h, w),
        "M_pv": (batch, n_cams, 1, h, w),
        "F_pv_bev": (batch, c_pv, fh, fw),
        "F_o": (batch, C, bh, bw),
        "F_ms": (batch, C, bh, bw),
        "F_pv_pooled": (batch, c_pv, bh, bw),
        "F_me": (batch, C, bh, bw),
        "F_de": (batch, cfg.channels[0], H, W),
        "M_bev_logits": (batch, cfg.num_classes, H, W),
        "M_hat_pv": (batch, H, W),
        "mask": (batch, H, W),
        "padded": (Hp, Wp),
    }
