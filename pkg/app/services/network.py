import logging
from typing import Dict, List, Optional, Union

import numpy as np

from app.models.network import ModelConfig
from app.services.autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    batchnorm,
    conv2d,
    glorot_uniform_init,
    gru_bidirectional,
    linear,
    maxpool,
    no_grad,
    ones_init,
    relu,
    reshape,
    softmax,
    transpose,
    zeros_init,
)
from app.utils.errors import ShapeError

logger = logging.getLogger(__name__)


class SleepStager:
    """
    Mixing convolution, R bottleneck residual blocks, a bidirectional GRU and a
    per-column softmax classifier. Input [B, C, T], output [B, K, T / 2^R].
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        self.params: Dict[str, Parameter] = {}
        self.buffers: Dict[str, BatchNormState] = {}
        rng = rng if rng is not None else np.random.default_rng(0)

        c = config.n_channels
        self._conv("mix.conv", (c, 1, c, 1), rng)
        self._norm("mix.bn", c)
        for r in range(1, config.n_blocks + 1):
            c_in, m, out = config.block_channels(r)
            self._conv(f"block{r}.conv1", (m, c_in, 1, 1), rng)
            self._norm(f"block{r}.bn1", m)
            self._conv(f"block{r}.conv2", (m, m, 1, 3), rng)
            self._norm(f"block{r}.bn2", m)
            self._conv(f"block{r}.conv3", (out, m, 1, 1), rng)
            self._norm(f"block{r}.bn3", out)
            self._conv(f"block{r}.shortcut", (out, c_in, 1, 1), rng)

        features = config.feature_channels
        hidden = config.hidden_units
        if hidden:
            for direction in ("fwd", "bwd"):
                self._add(glorot_uniform_init((features, 3 * hidden), rng, self.dtype, f"temp.{direction}.wx"))
                self._add(glorot_uniform_init((hidden, 3 * hidden), rng, self.dtype, f"temp.{direction}.wh"))
                self._add(zeros_init((3 * hidden,), self.dtype, f"temp.{direction}.b"))
        width = 2 * hidden if hidden else features
        self._add(glorot_uniform_init((width, config.n_classes), rng, self.dtype, "clf.w"))
        self._add(zeros_init((config.n_classes,), self.dtype, "clf.b"))

        # Audit jumlah parameter terhadap rumus di ModelConfig
        expected = config.parameter_count()
        if self.parameter_count() != expected:
            raise ShapeError(f"parameter count {self.parameter_count()} != documented formula {expected}")
        logger.debug(f"Built SleepStager with {expected} parameters")

    def _add(self, param: Parameter):
        self.params[param.name] = param

    def _conv(self, name: str, shape, rng):
        self._add(glorot_uniform_init(shape, rng, self.dtype, f"{name}.w"))
        self._add(zeros_init((shape[0],), self.dtype, f"{name}.b"))

    def _norm(self, name: str, features: int):
        self._add(ones_init((features,), self.dtype, f"{name}.gamma"))
        self._add(zeros_init((features,), self.dtype, f"{name}.beta"))
        self.buffers[name] = BatchNormState(features, dtype=self.dtype)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.params.items() if p.grad is not None}

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------

    def _conv_apply(self, x: Tensor, name: str, padding="same") -> Tensor:
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=padding)

    def _bn_apply(self, x: Tensor, name: str) -> Tensor:
        return batchnorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                         self.buffers[name], self.training)

    def phi_mix(self, x: Tensor) -> Tensor:
        """[B, C, T] -> [B, C, 1, T]: one C x 1 kernel per output map spanning all channels"""
        if x.ndim != 3 or x.shape[1] != self.config.n_channels:
            raise ShapeError(f"expected input [B, {self.config.n_channels}, T], got {x.shape}")
        image = reshape(x, (x.shape[0], 1, x.shape[1], x.shape[2]))
        mixed = self._conv_apply(image, "mix.conv", padding="valid")
        return relu(self._bn_apply(mixed, "mix.bn"))

    def residual_block(self, x: Tensor, r: int) -> Tensor:
        """[B, f_in, 1, L] -> [B, 4 f0 2^(r-1), 1, L/2]"""
        name = f"block{r}"
        h = relu(self._bn_apply(self._conv_apply(x, f"{name}.conv1"), f"{name}.bn1"))
        h = relu(self._bn_apply(self._conv_apply(h, f"{name}.conv2"), f"{name}.bn2"))
        h = self._bn_apply(self._conv_apply(h, f"{name}.conv3"), f"{name}.bn3")
        shortcut = self._conv_apply(x, f"{name}.shortcut")
        return maxpool(relu(h + shortcut), (1, 2))

    def phi_feat(self, x: Tensor) -> Tensor:
        """[B, C, 1, T] -> [B, f0 2^(R+1), 1, T / 2^R]"""
        if x.shape[-1] % self.config.reduction:
            raise ShapeError(f"temporal length {x.shape[-1]} not divisible by 2^R = {self.config.reduction}")
        for r in range(1, self.config.n_blocks + 1):
            x = self.residual_block(x, r)
        return x

    def phi_temp(self, h: Tensor) -> Tensor:
        """[B, T', F] -> [B, T', 2 n_h]; identity when n_h = 0"""
        if h.shape[-1] != self.config.feature_channels:
            raise ShapeError(f"expected {self.config.feature_channels} features, got {h.shape[-1]}")
        if not self.config.hidden_units:
            return h
        p = self.params
        return gru_bidirectional(
            h,
            (p["temp.fwd.wx"], p["temp.fwd.wh"], p["temp.fwd.b"]),
            (p["temp.bwd.wx"], p["temp.bwd.wh"], p["temp.bwd.b"]),
        )

    def phi_clf(self, h: Tensor) -> Tensor:
        """[B, T', D] -> [B, K, T'] with a softmax over K in every column"""
        logits = linear(h, self.params["clf.w"], self.params["clf.b"])
        return transpose(softmax(logits, axis=-1), (0, 2, 1))

    def forward(self, x: Union[np.ndarray, Tensor]) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 2:
            x = reshape(x, (1,) + x.shape)
        features = self.phi_feat(self.phi_mix(x))
        batch, channels, _, columns = features.shape
        sequence = transpose(reshape(features, (batch, channels, columns)), (0, 2, 1))
        return self.phi_clf(self.phi_temp(sequence))

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode probabilities without recording a graph"""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return self.forward(x).data
        finally:
            self.training = was_training

    # ------------------------------------------------------------------
    # State (checkpointing)
    # ------------------------------------------------------------------

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def buffer_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, state in self.buffers.items():
            arrays[f"{name}.running_mean"] = state.running_mean.copy()
            arrays[f"{name}.running_var"] = state.running_var.copy()
        return arrays

    def load_arrays(self, params: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray]):
        missing: List[str] = sorted(set(self.params) - set(params))
        if missing:
            raise ShapeError(f"checkpoint lacks parameters {missing[:5]}")
        for name, p in self.params.items():
            if params[name].shape != p.shape:
                raise ShapeError(f"parameter '{name}' has shape {params[name].shape}, expected {p.shape}")
            p.data = params[name].astype(self.dtype).copy()
        for name, state in self.buffers.items():
            state.running_mean = buffers[f"{name}.running_mean"].astype(self.dtype).copy()
            state.running_var = buffers[f"{name}.running_var"].astype(self.dtype).copy()
