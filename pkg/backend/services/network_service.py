"""
Network Service
Functional forward pass over a flat canonical parameter vector, gradients,
per-sample log-likelihood gradients and the canonical weight blob.

Every network (classifier, generator, probe) is an ArchSpec plus one flat tensor.
Keeping parameters flat lets the meta-learning code displace, clone and
differentiate through them without touching module objects.
"""

import logging
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from models.errors import NumericFailureError, RejectedInputError
from models.network import ArchSpec, LayerSpec, ParamSlot

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

Mode = Literal["train", "eval"]
ArrayLike = Union[np.ndarray, torch.Tensor]
BatchStats = Dict[int, Tuple[torch.Tensor, torch.Tensor]]


class NetworkState:
    """An architecture, its flat parameters and a BN mode. Not safe for concurrent mutation."""

    def __init__(
        self,
        arch: ArchSpec,
        params: Optional[ArrayLike] = None,
        mode: Mode = "eval",
        dtype: torch.dtype = torch.float32,
        seed: int = 0,
    ):
        self.arch = arch
        self.mode: Mode = mode
        self._layout = arch.layout()
        if params is None:
            params = init_params(arch, seed)
        self.params = _as_vector(arch, params, dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.params.dtype

    @property
    def layout(self) -> List[ParamSlot]:
        return self._layout

    def clone(self) -> "NetworkState":
        return NetworkState(self.arch, self.params.clone(), mode=self.mode, dtype=self.dtype)

    def astype(self, dtype: torch.dtype) -> "NetworkState":
        return NetworkState(self.arch, self.params.to(dtype), mode=self.mode, dtype=dtype)

    def with_mode(self, mode: Mode) -> "NetworkState":
        return NetworkState(self.arch, self.params, mode=mode, dtype=self.dtype)


def _as_vector(arch: ArchSpec, values: ArrayLike, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(values, np.ndarray):
        values = torch.from_numpy(np.ascontiguousarray(values))
    vec = values.detach().reshape(-1).to(dtype).clone()
    expected = arch.num_params()
    if vec.numel() != expected:
        raise RejectedInputError(f"parameter vector has length {vec.numel()}, arch needs {expected}")
    return vec


def init_params(arch: ArchSpec, seed: int) -> np.ndarray:
    """Fan-in scaled uniform init; BN gain 1, shift 0, running stats (0, 1)."""
    rng = np.random.default_rng(seed)
    out = np.zeros(arch.num_params(), dtype=np.float32)
    for slot in arch.layout():
        layer = arch.blocks[slot.layer]
        view = out[slot.offset:slot.offset + slot.size]
        if slot.role in ("weight", "bias"):
            if layer.kind == "conv":
                fan_in = arch.shapes()[slot.layer][0] * layer.kernel * layer.kernel
            else:
                fan_in = layer.in_features
            bound = 1.0 / np.sqrt(fan_in)
            view[:] = rng.uniform(-bound, bound, size=slot.size)
        elif slot.role in ("gain", "running_var"):
            view[:] = 1.0
    return out


def get_params(state: NetworkState) -> np.ndarray:
    """ParamVector copy in canonical order."""
    return state.params.detach().cpu().numpy().copy()


def set_params(state: NetworkState, values: ArrayLike) -> NetworkState:
    """The only mutation path for parameters."""
    state.params = _as_vector(state.arch, values, state.dtype)
    return state


def trainable_mask(arch: ArchSpec, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """1 on weights/biases/gains/shifts, 0 on running statistics."""
    mask = torch.zeros(arch.num_params(), dtype=dtype)
    for slot in arch.layout():
        if slot.trainable:
            mask[slot.offset:slot.offset + slot.size] = 1.0
    return mask


def slot_views(arch: ArchSpec, flat: torch.Tensor, layout: Optional[List[ParamSlot]] = None):
    views: Dict[int, Dict[str, torch.Tensor]] = {}
    for slot in layout or arch.layout():
        views.setdefault(slot.layer, {})[slot.role] = flat[slot.offset:slot.offset + slot.size].view(slot.shape)
    return views


def apply(
    arch: ArchSpec,
    flat: torch.Tensor,
    x: torch.Tensor,
    mode: Mode,
    batch_stats: Optional[BatchStats] = None,
    layout: Optional[List[ParamSlot]] = None,
) -> torch.Tensor:
    """
    Differentiable forward pass.
    Images enter as B x H x W x C and are moved to channels-first internally.
    When `batch_stats` is given, the biased batch mean/variance of every BN input
    is recorded under the layer index (with the autograd graph attached).
    """
    if x.dim() == 4:
        x = x.permute(0, 3, 1, 2)
    views = slot_views(arch, flat, layout)
    for i, layer in enumerate(arch.blocks):
        p = views.get(i, {})
        kind = layer.kind
        if kind == "conv":
            x = F.conv2d(x, p["weight"], p["bias"], stride=layer.stride, padding=layer.pad)
        elif kind == "batchnorm":
            x = _batchnorm(x, p, mode, batch_stats, i)
        elif kind == "relu":
            x = F.relu(x)
        elif kind == "leaky_relu":
            x = F.leaky_relu(x, layer.negative_slope)
        elif kind == "maxpool":
            x = F.max_pool2d(x, layer.factor)
        elif kind == "upsample":
            x = F.interpolate(x, scale_factor=layer.factor, mode="nearest")
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif kind == "fc":
            if x.dim() > 2:
                x = x.reshape(x.shape[0], -1)
            x = F.linear(x, p["weight"], p["bias"])
        elif kind == "reshape":
            x = x.reshape(x.shape[0], *layer.shape)
        elif kind == "sigmoid":
            x = torch.sigmoid(x)
    if x.dim() == 4:
        x = x.permute(0, 2, 3, 1)
    return x


def _batchnorm(x: torch.Tensor, p: Dict[str, torch.Tensor], mode: Mode, batch_stats, index: int) -> torch.Tensor:
    dims = (0, 2, 3) if x.dim() == 4 else (0,)
    shape = (1, -1, 1, 1) if x.dim() == 4 else (1, -1)
    need_stats = mode == "train" or batch_stats is not None
    if need_stats:
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        if batch_stats is not None:
            batch_stats[index] = (mean, var)
    if mode == "train":
        mu, sigma2 = mean, var
    else:
        mu, sigma2 = p["running_mean"], p["running_var"]
    x_hat = (x - mu.view(shape)) / torch.sqrt(sigma2.view(shape) + BN_EPS)
    return x_hat * p["gain"].view(shape) + p["shift"].view(shape)


def update_running_stats(
    arch: ArchSpec, flat: torch.Tensor, stats: BatchStats, momentum: float = BN_MOMENTUM
) -> None:
    """running <- (1 - momentum) * running + momentum * biased batch stat, in place."""
    views = slot_views(arch, flat)
    with torch.no_grad():
        for layer, (mean, var) in stats.items():
            rm = views[layer]["running_mean"]
            rv = views[layer]["running_var"]
            rm.mul_(1.0 - momentum).add_(momentum * mean.detach().to(rm.dtype))
            rv.mul_(1.0 - momentum).add_(momentum * var.detach().to(rv.dtype))


def to_tensor(batch: ArrayLike, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(batch)).to(dtype)
    return batch.to(dtype)


def check_input(arch: ArchSpec, batch: ArrayLike) -> None:
    if tuple(batch.shape[1:]) != tuple(arch.input_shape):
        raise RejectedInputError(
            f"batch shape {tuple(batch.shape)} does not match arch input {tuple(arch.input_shape)}"
        )


def forward(state: NetworkState, batch: ArrayLike) -> torch.Tensor:
    """Raw outputs. In train mode the running statistics of `state` are updated."""
    check_input(state.arch, batch)
    x = to_tensor(batch, state.dtype)
    stats: BatchStats = {}
    with torch.no_grad():
        out = apply(
            state.arch, state.params, x, state.mode,
            batch_stats=stats if state.mode == "train" else None, layout=state.layout,
        )
        if state.mode == "train" and stats:
            update_running_stats(state.arch, state.params, stats)
    if not torch.isfinite(out).all():
        raise NumericFailureError("non-finite network output", term="forward")
    return out


def forward_logits(state: NetworkState, batch: ArrayLike) -> torch.Tensor:
    """B x num_outputs logits."""
    return forward(state, batch)


LossFn = Callable[[torch.Tensor, Any], torch.Tensor]


def flat_grad(loss: torch.Tensor, params: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Gradient w.r.t. a flat leaf; entries the loss does not touch come back as 0."""
    (grad,) = torch.autograd.grad(loss, params, create_graph=create_graph, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(params)
    return grad


def loss_grad(state: NetworkState, loss: LossFn, batch: Any = None) -> torch.Tensor:
    """Gradient of loss(params, batch) in canonical order."""
    params = state.params.detach().clone().requires_grad_(True)
    value = loss(params, batch)
    if not torch.isfinite(value):
        raise NumericFailureError("non-finite loss", term=f"loss={value.item()}")
    return flat_grad(value, params).detach()


def cross_entropy_loss(state: NetworkState, labels: ArrayLike) -> LossFn:
    """loss(params, images) = mean CE of state's network in state's mode (stats not tracked)."""
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)

    def loss(params: torch.Tensor, images: ArrayLike) -> torch.Tensor:
        logits = apply(state.arch, params, to_tensor(images, params.dtype), state.mode, layout=state.layout)
        return F.cross_entropy(logits, y)

    return loss


def _check_labels(state: NetworkState, labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= state.arch.num_outputs):
        raise RejectedInputError(
            f"labels must lie in [0, {state.arch.num_outputs}), got range [{labels.min()}, {labels.max()}]"
        )


def per_sample_loglik_grads(state: NetworkState, images: ArrayLike, labels: ArrayLike) -> torch.Tensor:
    """N x |params| matrix; row j = d log P(y_j | x_j) / d params."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(state, labels)
    check_input(state.arch, images)
    x = to_tensor(images, state.dtype)
    y = torch.from_numpy(labels)
    arch, layout, mode = state.arch, state.layout, state.mode

    def loglik(params: torch.Tensor, xi: torch.Tensor, yi: torch.Tensor) -> torch.Tensor:
        logits = apply(arch, params, xi.unsqueeze(0), mode, layout=layout)
        return F.log_softmax(logits, dim=1).gather(1, yi.view(1, 1)).squeeze()

    if mode == "eval":
        grads = torch.func.vmap(torch.func.grad(loglik), in_dims=(None, 0, 0))(state.params, x, y)
    else:
        # batch statistics couple samples through BN, so each row is its own single-sample pass
        rows = []
        for j in range(x.shape[0]):
            params = state.params.detach().clone().requires_grad_(True)
            rows.append(flat_grad(loglik(params, x[j], y[j]), params))
        grads = torch.stack(rows) if rows else torch.zeros((0, state.params.numel()), dtype=state.dtype)
    if not torch.isfinite(grads).all():
        raise NumericFailureError("non-finite per-sample gradient", term="loglik")
    return grads.detach()


def to_blob(values: ArrayLike) -> bytes:
    """Canonical weight blob: little-endian float32, no header."""
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype="<f4").tobytes()


def from_blob(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype="<f4").astype(np.float32)


def compose(backbone: ArchSpec, head_outputs: int) -> ArchSpec:
    """Backbone (ending in flatten) + linear head; canonical order puts the head last."""
    blocks = list(backbone.blocks) + [
        LayerSpec(kind="fc", in_features=backbone.num_outputs, out_features=head_outputs)
    ]
    return ArchSpec(kind="conv4-like", blocks=blocks, input_shape=backbone.input_shape, num_outputs=head_outputs)
