"""The three network configurations: encoder-only, decoder-only, encoder+decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from vxf import functional as F
from vxf.decoder import DecoderConfig, MaskDecoder, Snapshot
from vxf.encoder import EncoderConfig, TransformerEncoder
from vxf.losses import GroundTruthSegments, deep_supervision, hybrid_seg_loss, matching_loss
from vxf.nn import Conv3d, Module
from vxf.tensor import Tensor, as_tensor, no_grad
from vxf.unet import UNet, UNetConfig

CONFIGURATIONS = ("encoder_only", "decoder_only", "encoder_decoder")


@dataclass
class ModelConfig:
    configuration: str = "decoder_only"
    crop: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 4
    unet: UNetConfig = field(default_factory=UNetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.configuration not in CONFIGURATIONS:
            raise ValueError(f"configuration must be one of {CONFIGURATIONS}, got {self.configuration!r}")
        self.crop = tuple(int(c) for c in self.crop)
        self.decoder.num_classes = self.num_classes

    @property
    def uses_encoder(self) -> bool:
        return self.configuration in ("encoder_only", "encoder_decoder")

    @property
    def uses_decoder(self) -> bool:
        return self.configuration in ("decoder_only", "encoder_decoder")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unet = UNetConfig(**d.pop("unet", {}))
        enc = EncoderConfig(**d.pop("encoder", {}))
        dec = DecoderConfig(**d.pop("decoder", {}))
        return cls(unet=unet, encoder=enc, decoder=dec, **d)


@dataclass
class ForwardOutput:
    pixel_logits: Tensor | None = None  # [D, H, W, K] (encoder-only)
    snapshots: list[Snapshot] = field(default_factory=list)  # coarse -> fine


class SegmentationModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        depth = config.unet.depth
        d_out = config.decoder.d_dec if config.uses_decoder else None
        self.unet = UNet(config.unet, rng, d_out=d_out)
        self.vit = None
        self.vit_level = None
        if config.uses_encoder:
            self.vit, self.vit_level = self._build_encoder(rng)
        self.decoder = None
        self.head = None
        if config.uses_decoder:
            stage_ch = [config.unet.channels(level) for level in reversed(range(depth + 1))]
            self.decoder = MaskDecoder(config.decoder, stage_ch, rng)
        else:
            self.head = Conv3d(config.unet.channels(0), config.num_classes, 1, rng)

    def _build_encoder(self, rng):
        cfg = self.config
        depth = cfg.unet.depth
        bottom = tuple(c // 2 ** depth for c in cfg.crop)
        p = cfg.encoder.patch_size
        if cfg.encoder.source == "raw_volume":
            level, channels = None, cfg.unet.in_channels
            if p != 2 ** depth:
                raise ValueError(f"raw-volume tokens need patch size {2 ** depth} to match the bottleneck grid")
        else:
            shift = int(round(np.log2(p)))
            if 2 ** shift != p or shift > depth:
                raise ValueError(f"patch size {p} must be a power of two <= {2 ** depth}")
            level = depth - shift
            channels = cfg.unet.channels(level)
        vit = TransformerEncoder(cfg.encoder, channels, bottom, cfg.unet.channels(depth), rng)
        return vit, level

    def _hook(self, x: Tensor):
        if self.vit is None:
            return None

        def hook(bottleneck, skips):
            if self.vit_level is None:
                src = x
            elif self.vit_level == len(skips):
                src = bottleneck
            else:
                src = skips[self.vit_level]
            return bottleneck + self.vit(src)

        return hook

    def forward(self, image) -> ForwardOutput:
        x = as_tensor(image)
        if x.ndim == 3:
            x = x.reshape(x.shape + (1,))
        pyramid = self.unet(x, bottleneck_hook=self._hook(x))
        if self.decoder is None:
            return ForwardOutput(pixel_logits=self.head(pyramid.finest))
        return ForwardOutput(snapshots=self.decoder.refine(pyramid))

    # ------------------------------------------------------------------ loss
    def loss(self, image, labels, lambda0: float = 0.7, lambda1: float = 0.3) -> Tensor:
        out = self.forward(image)
        K = self.config.num_classes
        if out.pixel_logits is not None:
            logits = out.pixel_logits.reshape(-1, K).T
            return hybrid_seg_loss(logits, labels)
        gt = GroundTruthSegments.from_labels(labels, K)
        stage_losses = [matching_loss(s.mask_logits, s.O, gt, lambda0, lambda1)[0] for s in out.snapshots]
        return deep_supervision(stage_losses[::-1])

    # ------------------------------------------------------------ prediction
    def predict_window(self, image, mask_mode: str = "soft", background: str = "no_object",
                       all_snapshots: bool = False):
        """Class-probability map(s) ``[K, D, H, W]`` for one window, without gradients.

        Decoder configurations aggregate queries: ``prob[k] = sum_n c[n, k] m[n]``
        with ``c = softmax(O)`` and ``m = sigmoid(mask logits)`` (``soft``) or the
        one-hot labels and binary masks (``binary``).  With
        ``background="no_object"`` class 0 is treated as the no-object label:
        queries do not vote for it and ``prob[0] = max(0, 1 - sum_{k>0} prob[k])``.
        ``background="query_sum"`` keeps the plain sum for every class.
        """
        with no_grad():
            out = self.forward(image)
        spatial = tuple(np.asarray(image).shape[:3]) if not isinstance(image, Tensor) else image.shape[:3]
        K = self.config.num_classes
        if out.pixel_logits is not None:
            prob = F.softmax_lastdim(out.pixel_logits).data.reshape(-1, K).T.reshape((K,) + spatial)
            return [prob] if all_snapshots else prob
        snaps = out.snapshots if all_snapshots else out.snapshots[-1:]
        probs = [query_probabilities(s.mask_logits.data, s.O.data, spatial, mask_mode, background)
                 for s in snaps]
        return probs if all_snapshots else probs[0]


def query_probabilities(mask_logits: np.ndarray, class_logits: np.ndarray, spatial,
                        mask_mode: str = "soft", background: str = "no_object") -> np.ndarray:
    K = class_logits.shape[1]
    if mask_mode == "soft":
        m = expit(mask_logits)
        o = class_logits - class_logits.max(axis=1, keepdims=True)
        c = np.exp(o)
        c /= c.sum(axis=1, keepdims=True)
    elif mask_mode == "binary":
        m = (mask_logits >= 0).astype(mask_logits.dtype)
        c = np.eye(K, dtype=mask_logits.dtype)[np.argmax(class_logits, axis=1)]
    else:
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    prob = c.T @ m
    if background == "no_object":
        prob[0] = np.maximum(0.0, 1.0 - prob[1:].sum(axis=0))
    elif background != "query_sum":
        raise ValueError(f"unknown background mode {background!r}")
    return prob.reshape((K,) + tuple(spatial))
