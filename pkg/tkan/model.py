"""Full clip model: optional frame encoder, feature batch norm, temporal head, classifier.

Each component draws its initial weights from its own named random stream, so
models that differ only in head type share bit-identical encoder, norm and
classifier-stream initialisations.
"""

import numpy as np

from .baselines import LstmHead, TransformerHead
from .encoder import FrameEncoder
from .errors import ContractError
from .head import ClassifierHead, TkanCell
from .numerics import BatchNorm, Module, split_rng
from .spline import SplineGrid

HEAD_TYPES = ("tkan", "lstm", "transformer")
INPUT_MODES = ("frames", "features")
SHARED_PREFIXES = ("encoder.", "feature_norm.")


def build_temporal_head(config, rng):
    if config.head == "tkan":
        grid = SplineGrid(config.grid_min, config.grid_max, config.grid_size, config.spline_degree)
        return TkanCell(
            config.width,
            rng,
            sub_width=config.sub_width or None,
            num_sublayers=config.sublayers,
            grid=grid,
            rho=config.rho,
            forget_bias=config.forget_bias,
        )
    if config.head == "lstm":
        return LstmHead(config.width, rng, widths=tuple(config.lstm_widths), forget_bias=config.forget_bias)
    if config.head == "transformer":
        return TransformerHead(
            config.width,
            rng,
            heads=config.transformer_heads,
            ff_width=config.transformer_ff,
            num_layers=config.transformer_layers,
            max_length=config.clip_length,
            norm_first=config.norm_first,
        )
    raise ContractError(f"unknown head type {config.head!r}; expected one of {HEAD_TYPES}")


class GaitModel(Module):
    def __init__(self, config, num_classes):
        super().__init__()
        if config.input_mode not in INPUT_MODES:
            raise ContractError(f"unknown input mode {config.input_mode!r}")
        self.config = config
        self.num_classes = num_classes
        self.encoder = None
        if config.input_mode == "frames":
            self.encoder = self.add_child(
                "encoder",
                FrameEncoder(
                    split_rng(config.seed, "encoder"),
                    channels=config.encoder_channels,
                    width=config.width,
                    frame_size=config.frame_size,
                ),
            )
        self.feature_norm = self.add_child("feature_norm", BatchNorm(config.width, axis=-1))
        self.head = self.add_child("head", build_temporal_head(config, split_rng(config.seed, f"head:{config.head}")))
        self.classifier = self.add_child(
            "classifier",
            ClassifierHead(
                self.head.out_width,
                num_classes,
                split_rng(config.seed, "classifier"),
                rate=config.dropout,
            ),
        )

    def _features(self, inputs, training):
        inputs = np.asarray(inputs, dtype=np.float64)
        batch, steps = inputs.shape[:2]
        if self.encoder is None:
            if inputs.ndim != 3 or inputs.shape[2] != self.config.width:
                raise ContractError(
                    f"feature input must be (B, T, {self.config.width}), got {inputs.shape}"
                )
            return inputs, None
        features, cache = self.encoder.encode_frames(inputs.reshape((batch * steps,) + inputs.shape[2:]), training)
        return features.reshape(batch, steps, -1), cache

    def forward(self, inputs, training=False, rng=None):
        """``inputs`` is ``(B, T, 1, S, S)`` frames or ``(B, T, d)`` features."""
        features, encoder_cache = self._features(inputs, training)
        batch, steps, width = features.shape
        normed, norm_cache = self.feature_norm.forward(features.reshape(batch * steps, width), training)
        H, head_cache = self.head.forward(normed.reshape(batch, steps, width))
        pooled, logits, probs, cls_cache = self.classifier.forward(H, training=training, rng=rng)
        return pooled, logits, probs, (encoder_cache, norm_cache, head_cache, cls_cache, features.shape)

    def backward(self, grad_logits, cache):
        encoder_cache, norm_cache, head_cache, cls_cache, shape = cache
        grad_H = self.classifier.backward(grad_logits, cls_cache)
        grad_normed = self.head.backward(grad_H, head_cache)
        grad_features = self.feature_norm.backward(grad_normed.reshape(-1, shape[2]), norm_cache)
        if self.encoder is not None:
            grad_frames = self.encoder.backward(grad_features, encoder_cache)
            return grad_frames.reshape(shape[:2] + grad_frames.shape[1:])
        return grad_features.reshape(shape)

    def embed(self, inputs, batch_size=8):
        inputs = np.asarray(inputs, dtype=np.float64)
        chunks = [
            self.forward(inputs[start : start + batch_size], training=False)[0]
            for start in range(0, len(inputs), batch_size)
        ]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.head.out_width))

    def shared_state(self):
        return {
            name: value
            for name, value in self.state_dict().items()
            if name.startswith(SHARED_PREFIXES)
        }


def shared_initialisation_matches(models):
    """True when every model carries identical encoder and feature-norm tensors."""
    reference = models[0].shared_state()
    for model in models[1:]:
        other = model.shared_state()
        if other.keys() != reference.keys():
            return False
        if any(not np.array_equal(reference[name], other[name]) for name in reference):
            return False
    return True
