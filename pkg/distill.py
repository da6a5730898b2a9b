"""
Forward-pass multi-modal distillation operators

Task feature stacks are N x C x H x W arrays (one C x H x W map per task).
Attention maps are convolutions applied to one task's features; 1 x 1 by
default, 3 x 3 with zero padding when the weights carry a spatial kernel.
All arithmetic is float64 on CPU. Parameters are inputs; nothing is trained.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from errors import DimensionError, DomainError

logger = logging.getLogger(__name__)

OPERATORS = ('padnet', 'mtinet', 'harmonize', 'se', 'fpm')


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _stack(x) -> torch.Tensor:
    t = _t(x)
    if t.ndim != 4:
        raise DimensionError(f"task feature stack must be N x C x H x W, got shape {tuple(t.shape)}")
    return t


@dataclass
class AttentionParams:
    """
    Per ordered task pair (k, l) attention maps

    weight is N x N x C x C (1 x 1) or N x N x C x C x k x k, bias N x N x C.
    value_weight / value_bias are the optional second maps of the multi-scale
    form; when absent the attended features pass through unchanged.
    """

    weight: np.ndarray
    bias: np.ndarray
    value_weight: Optional[np.ndarray] = None
    value_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim == 4:
            self.weight = self.weight[..., None, None]
        if self.weight.ndim != 6 or self.weight.shape[0] != self.weight.shape[1]:
            raise DimensionError(f"attention weight must be N x N x C x C[ x k x k], got {self.weight.shape}")
        n, _, c_out, c_in, kh, kw = self.weight.shape
        if c_out != c_in or kh != kw or kh % 2 == 0:
            raise DimensionError(f"attention weight must be square with an odd kernel, got {self.weight.shape}")
        if self.bias.shape != (n, n, c_out):
            raise DimensionError(f"attention bias must be {(n, n, c_out)}, got {self.bias.shape}")
        if self.value_weight is not None:
            self.value_weight = np.asarray(self.value_weight, dtype=np.float64)
            if self.value_weight.ndim == 4:
                self.value_weight = self.value_weight[..., None, None]
            if self.value_weight.shape != self.weight.shape:
                raise DimensionError("value weight must match the attention weight shape")
            vb = np.zeros_like(self.bias) if self.value_bias is None else np.asarray(self.value_bias, dtype=np.float64)
            if vb.shape != self.bias.shape:
                raise DimensionError("value bias must match the attention bias shape")
            self.value_bias = vb

    @property
    def num_tasks(self) -> int:
        return self.weight.shape[0]

    @property
    def channels(self) -> int:
        return self.weight.shape[2]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]


def _check_params(stack: torch.Tensor, params: AttentionParams):
    n, c = stack.shape[:2]
    if params.num_tasks != n or params.channels != c:
        raise DimensionError(
            f"params for {params.num_tasks} tasks x {params.channels} channels, "
            f"features have {n} x {c}"
        )


def _conv(feature: torch.Tensor, weight: np.ndarray, bias: np.ndarray) -> torch.Tensor:
    """Convolve one C x H x W map, zero-padded to keep its size"""
    k = weight.shape[-1]
    return F.conv2d(feature[None], _t(weight), _t(bias), padding=k // 2)[0]


def _distill(stack: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    _check_params(stack, params)
    out = stack.clone()
    n = stack.shape[0]
    for k in range(n):
        for l in range(n):
            if l == k:
                continue
            mask = torch.sigmoid(_conv(stack[l], params.weight[k, l], params.bias[k, l]))
            value = stack[l] if params.value_weight is None else \
                _conv(stack[l], params.value_weight[k, l], params.value_bias[k, l])
            out[k] = out[k] + mask * value
    return out


def padnet_distill(stack: np.ndarray, params: AttentionParams) -> np.ndarray:
    """F_k + sum over l != k of sigmoid(W_kl F_l) * F_l"""
    if params.value_weight is not None:
        raise DomainError("single-scale distillation takes no value maps")
    return _distill(_stack(stack), params).numpy()


def mtinet_distill(stacks: Sequence[np.ndarray], params: Sequence[AttentionParams]) -> List[np.ndarray]:
    """
    Per-scale distillation, each scale in isolation

    F_ks + sum over l != k of sigmoid(W_kls F_ls) * (W'_kls F_ls)
    """
    if len(stacks) != len(params):
        raise DimensionError(f"{len(stacks)} scales of features but {len(params)} scales of params")
    if not stacks:
        raise DimensionError("need at least one scale")
    return [_distill(_stack(s), p).numpy() for s, p in zip(stacks, params)]


@dataclass
class HarmonizeParams:
    """1 x 1 maps: mix (N*C -> N*C, followed by the nonlinearity) and reduce (N*C -> C)"""

    mix_weight: np.ndarray
    mix_bias: np.ndarray
    reduce_weight: np.ndarray
    reduce_bias: np.ndarray
    activation: str = 'relu'

    def __post_init__(self):
        self.mix_weight = np.asarray(self.mix_weight, dtype=np.float64)
        self.mix_bias = np.asarray(self.mix_bias, dtype=np.float64)
        self.reduce_weight = np.asarray(self.reduce_weight, dtype=np.float64)
        self.reduce_bias = np.asarray(self.reduce_bias, dtype=np.float64)
        nc = self.mix_weight.shape[0]
        if self.mix_weight.shape != (nc, nc) or self.mix_bias.shape != (nc,):
            raise DimensionError("mix map must be NC x NC with NC bias terms")
        c = self.reduce_weight.shape[0]
        if self.reduce_weight.shape != (c, nc) or self.reduce_bias.shape != (c,) or nc % c:
            raise DimensionError("reduce map must be C x NC with C bias terms")
        if self.activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")


_ACTIVATIONS = {'relu': torch.relu, 'identity': lambda x: x, 'tanh': torch.tanh}


class HarmonizeResult(NamedTuple):
    shared: np.ndarray
    attention: np.ndarray


def _linear1x1(x: torch.Tensor, weight: np.ndarray, bias: np.ndarray) -> torch.Tensor:
    return F.conv2d(x[None], _t(weight)[:, :, None, None], _t(bias))[0]


def _harmonize(stack: torch.Tensor, params: HarmonizeParams):
    n, c, h, w = stack.shape
    if params.mix_weight.shape[0] != n * c or params.reduce_weight.shape[0] != c:
        raise DimensionError(f"harmonize params do not fit {n} tasks x {c} channels")
    joined = stack.reshape(n * c, h, w)
    logits = _ACTIVATIONS[params.activation](_linear1x1(joined, params.mix_weight, params.mix_bias))
    attention = torch.softmax(logits.reshape(n, c, h, w), dim=0)
    attended = (attention * stack).reshape(n * c, h, w)
    return _linear1x1(attended, params.reduce_weight, params.reduce_bias), attention


def feature_harmonize(stack: np.ndarray, params: HarmonizeParams) -> HarmonizeResult:
    """
    Fuse task features into one shared C x H x W map

    The concatenated features pass through the mix map and nonlinearity,
    are split into N chunks, and a softmax across the task axis weighs each
    task's features per (channel, pixel). The attended maps are concatenated
    and reduced back to C channels.
    """
    shared, attention = _harmonize(_stack(stack), params)
    return HarmonizeResult(shared.numpy(), attention.numpy())


@dataclass
class SEParams:
    """Excitation MLP: C -> C directly, or C -> hidden -> C with a ReLU bottleneck"""

    weight1: np.ndarray
    bias1: Optional[np.ndarray] = None
    weight2: Optional[np.ndarray] = None
    bias2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight1 = np.asarray(self.weight1, dtype=np.float64)
        hidden, c = self.weight1.shape
        self.bias1 = np.zeros(hidden) if self.bias1 is None else np.asarray(self.bias1, dtype=np.float64)
        if self.weight2 is None:
            if hidden != c:
                raise DimensionError("single-layer excitation must map C -> C")
            return
        self.weight2 = np.asarray(self.weight2, dtype=np.float64)
        if self.weight2.shape != (c, hidden):
            raise DimensionError(f"second excitation layer must be {(c, hidden)}, got {self.weight2.shape}")
        self.bias2 = np.zeros(c) if self.bias2 is None else np.asarray(self.bias2, dtype=np.float64)

    @property
    def channels(self) -> int:
        return self.weight1.shape[1]


class GateResult(NamedTuple):
    output: np.ndarray
    gates: np.ndarray


def _se(feature: torch.Tensor, params: SEParams):
    if feature.ndim != 3 or feature.shape[0] != params.channels:
        raise DimensionError(f"SE gate expects {params.channels} x H x W, got {tuple(feature.shape)}")
    pooled = feature.mean(dim=(1, 2))
    z = _t(params.weight1) @ pooled + _t(params.bias1)
    if params.weight2 is not None:
        z = _t(params.weight2) @ torch.relu(z) + _t(params.bias2)
    gates = torch.sigmoid(z)
    return feature * gates[:, None, None], gates


def se_gate(feature: np.ndarray, params: SEParams) -> GateResult:
    """Scale each channel by sigmoid(mlp(global average pool))"""
    out, gates = _se(_t(feature), params)
    return GateResult(out.numpy(), gates.numpy())


def feature_propagation(stack: np.ndarray, harmonize: HarmonizeParams,
                        gates: Sequence[SEParams]) -> np.ndarray:
    """Harmonize, gate the shared map once per task, add it back to each task's features"""
    s = _stack(stack)
    if len(gates) != s.shape[0]:
        raise DimensionError(f"{len(gates)} gates for {s.shape[0]} tasks")
    shared, _ = _harmonize(s, harmonize)
    out = torch.stack([s[k] + _se(shared, gates[k])[0] for k in range(s.shape[0])])
    return out.numpy()


# ---------------------------------------------------------------------------
# Per-pixel reference loops
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _naive_conv_at(feature: np.ndarray, weight: np.ndarray, bias: np.ndarray, y: int, x: int) -> np.ndarray:
    c, h, w = feature.shape
    k = weight.shape[-1]
    r = k // 2
    out = np.array(bias, dtype=np.float64)
    for o in range(weight.shape[0]):
        for i in range(c):
            for dy in range(k):
                for dx in range(k):
                    yy, xx = y + dy - r, x + dx - r
                    if 0 <= yy < h and 0 <= xx < w:
                        out[o] += weight[o, i, dy, dx] * feature[i, yy, xx]
    return out


def naive_distill(stack: np.ndarray, params: AttentionParams) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    n, c, h, w = stack.shape
    out = stack.copy()
    for k in range(n):
        for l in range(n):
            if l == k:
                continue
            for y in range(h):
                for x in range(w):
                    mask = _sigmoid(_naive_conv_at(stack[l], params.weight[k, l], params.bias[k, l], y, x))
                    if params.value_weight is None:
                        value = stack[l, :, y, x]
                    else:
                        value = _naive_conv_at(stack[l], params.value_weight[k, l], params.value_bias[k, l], y, x)
                    out[k, :, y, x] += mask * value
    return out


def naive_harmonize(stack: np.ndarray, params: HarmonizeParams) -> HarmonizeResult:
    stack = np.asarray(stack, dtype=np.float64)
    n, c, h, w = stack.shape
    act = {'relu': lambda v: np.maximum(v, 0.0), 'identity': lambda v: v, 'tanh': np.tanh}[params.activation]
    shared = np.zeros((c, h, w))
    attention = np.zeros((n, c, h, w))
    for y in range(h):
        for x in range(w):
            joined = stack[:, :, y, x].reshape(n * c)
            logits = act(params.mix_weight @ joined + params.mix_bias).reshape(n, c)
            e = np.exp(logits - logits.max(axis=0))
            att = e / e.sum(axis=0)
            attention[:, :, y, x] = att
            attended = (att * stack[:, :, y, x]).reshape(n * c)
            shared[:, y, x] = params.reduce_weight @ attended + params.reduce_bias
    return HarmonizeResult(shared, attention)


def naive_se(feature: np.ndarray, params: SEParams) -> GateResult:
    feature = np.asarray(feature, dtype=np.float64)
    c, h, w = feature.shape
    pooled = np.array([sum(feature[i, y, x] for y in range(h) for x in range(w)) / (h * w) for i in range(c)])
    z = params.weight1 @ pooled + params.bias1
    if params.weight2 is not None:
        z = params.weight2 @ np.maximum(z, 0.0) + params.bias2
    gates = _sigmoid(z)
    return GateResult(feature * gates[:, None, None], gates)


def naive_propagation(stack: np.ndarray, harmonize: HarmonizeParams, gates: Sequence[SEParams]) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    shared = naive_harmonize(stack, harmonize).shared
    return np.stack([stack[k] + naive_se(shared, gates[k]).output for k in range(stack.shape[0])])


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def random_attention_params(rng: np.random.Generator, tasks: int, channels: int, kernel_size: int = 1,
                            with_values: bool = False) -> AttentionParams:
    shape = (tasks, tasks, channels, channels, kernel_size, kernel_size)
    value_w = rng.standard_normal(shape) if with_values else None
    value_b = rng.standard_normal((tasks, tasks, channels)) if with_values else None
    return AttentionParams(rng.standard_normal(shape), rng.standard_normal((tasks, tasks, channels)),
                           value_w, value_b)


def random_harmonize_params(rng: np.random.Generator, tasks: int, channels: int) -> HarmonizeParams:
    nc = tasks * channels
    return HarmonizeParams(rng.standard_normal((nc, nc)), rng.standard_normal(nc),
                           rng.standard_normal((channels, nc)), rng.standard_normal(channels))


def random_se_params(rng: np.random.Generator, channels: int, hidden: Optional[int] = None) -> SEParams:
    if hidden is None:
        return SEParams(rng.standard_normal((channels, channels)), rng.standard_normal(channels))
    return SEParams(rng.standard_normal((hidden, channels)), rng.standard_normal(hidden),
                    rng.standard_normal((channels, hidden)), rng.standard_normal(channels))


def max_abs_diff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def _pick(loaded: Mapping[str, np.ndarray], prefix: str, keys: Sequence[str], index=None) -> Dict[str, np.ndarray]:
    out = {}
    for key in keys:
        name = f"{prefix}{key}"
        if name in loaded:
            out[key] = loaded[name] if index is None else loaded[name][index]
    return out


PARAM_NAMES: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    'padnet': (('weight', 'bias'), ()),
    'mtinet': (('weight', 'bias'), ('value_weight', 'value_bias')),
    'harmonize': (('mix_weight', 'mix_bias', 'reduce_weight', 'reduce_bias'), ()),
    'se': (('weight1',), ('bias1', 'weight2', 'bias2')),
    'fpm': (('mix_weight', 'mix_bias', 'reduce_weight', 'reduce_bias', 'gate_weight1'),
            ('gate_bias1', 'gate_weight2', 'gate_bias2')),
}


def check_param_names(operator: str, names: Iterable[str]):
    """Raise DomainError naming any unknown or missing parameter array for `operator`"""
    if operator not in PARAM_NAMES:
        raise DomainError(f"unknown operator {operator!r}; choose from {', '.join(OPERATORS)}")
    required, optional = PARAM_NAMES[operator]
    names = set(names)
    unknown = sorted(names - set(required) - set(optional))
    if unknown:
        raise DomainError(f"unknown {operator} parameter(s) {unknown}; "
                          f"allowed: {', '.join(required + optional)}")
    missing = [name for name in required if name not in names]
    if missing:
        raise DomainError(f"missing {operator} parameter(s) {missing}")


def build_params(operator: str, tasks: int, channels: int, scales: int, rng: np.random.Generator,
                 kernel_size: int = 1, loaded: Optional[Mapping[str, np.ndarray]] = None):
    """
    Parameters for one operator, from `loaded` arrays when given, else random

    Loaded names: weight, bias (+ value_weight, value_bias with a leading
    scale axis for mtinet); mix_weight, mix_bias, reduce_weight, reduce_bias
    for harmonize; weight1, bias1, weight2, bias2 for se; fpm takes the
    harmonize names plus gate_weight1 ... gate_bias2 with a leading task axis.
    """
    if operator not in OPERATORS:
        raise DomainError(f"unknown operator {operator!r}; choose from {', '.join(OPERATORS)}")
    if loaded:
        check_param_names(operator, loaded)
    hidden = max(1, channels // 2)
    attention_keys = ('weight', 'bias', 'value_weight', 'value_bias')
    harmonize_keys = ('mix_weight', 'mix_bias', 'reduce_weight', 'reduce_bias')
    se_keys = ('weight1', 'bias1', 'weight2', 'bias2')

    if operator == 'padnet':
        if loaded:
            return [AttentionParams(**_pick(loaded, '', attention_keys[:2]))]
        return [random_attention_params(rng, tasks, channels, kernel_size)]
    if operator == 'mtinet':
        if loaded:
            return [AttentionParams(**_pick(loaded, '', attention_keys, s)) for s in range(scales)]
        return [random_attention_params(rng, tasks, channels, kernel_size, with_values=True) for _ in range(scales)]
    if operator == 'harmonize':
        return HarmonizeParams(**_pick(loaded, '', harmonize_keys)) if loaded \
            else random_harmonize_params(rng, tasks, channels)
    if operator == 'se':
        return SEParams(**_pick(loaded, '', se_keys)) if loaded else random_se_params(rng, channels, hidden)
    if loaded:
        return (HarmonizeParams(**_pick(loaded, '', harmonize_keys)),
                [SEParams(**_pick(loaded, 'gate_', se_keys, k)) for k in range(tasks)])
    return (random_harmonize_params(rng, tasks, channels),
            [random_se_params(rng, channels, hidden) for _ in range(tasks)])


def run_distill_check(operator: str, features: Sequence[np.ndarray], params) -> Dict[str, object]:
    """
    Run one operator and compare it against the per-pixel loops

    Args:
        features: one N x C x H x W stack per scale
        params: as returned by build_params

    Returns:
        dict with 'outputs' (list of arrays) and 'max_abs_error'
    """
    if operator == 'padnet':
        outputs = [padnet_distill(features[0], params[0])]
        oracle = [naive_distill(features[0], params[0])]
    elif operator == 'mtinet':
        outputs = mtinet_distill(features, params)
        oracle = [naive_distill(s, p) for s, p in zip(features, params)]
    elif operator == 'harmonize':
        res, ref = feature_harmonize(features[0], params), naive_harmonize(features[0], params)
        outputs, oracle = [res.shared, res.attention], [ref.shared, ref.attention]
    elif operator == 'se':
        outputs = [se_gate(f, params).output for f in features[0]]
        oracle = [naive_se(f, params).output for f in features[0]]
    elif operator == 'fpm':
        outputs = [feature_propagation(features[0], *params)]
        oracle = [naive_propagation(features[0], *params)]
    else:
        raise DomainError(f"unknown operator {operator!r}; choose from {', '.join(OPERATORS)}")

    error = max(max_abs_diff(o, r) for o, r in zip(outputs, oracle))
    logger.info("%s: max |op - per-pixel loop| = %.3e", operator, error)
    return {'outputs': outputs, 'max_abs_error': error}
