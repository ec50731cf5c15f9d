"""Small convolutional classifier with hand-derived backpropagation.

Architecture (for a 28x28x1 input)::

    conv 32@3x3 s2 p1 -> batchnorm -> relu
    conv 64@3x3 s2 p0 -> batchnorm -> relu
    conv 64@3x3 s2 p0 -> relu
    linear 512 -> relu -> dropout
    linear num_classes

The same layer stack accepts other square inputs (e.g. 32x32x3); only the
flattened width of ``fc1`` changes.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

ARCH_ID = "mnistnet-v1"
WACK_MAGIC = b"WACK"
WACK_VERSION = 1

PARAM_ORDER = (
    "conv1.weight", "conv1.bias", "bn1.weight", "bn1.bias",
    "conv2.weight", "conv2.bias", "bn2.weight", "bn2.bias",
    "conv3.weight", "conv3.bias",
    "fc1.weight", "fc1.bias",
    "fc2.weight", "fc2.bias",
)
BUFFER_ORDER = ("bn1.running_mean", "bn1.running_var", "bn2.running_mean", "bn2.running_var")

# (name, out_channels, stride, padding, has_batchnorm)
CONV_SPECS = (("conv1", 32, 2, 1, True), ("conv2", 64, 2, 0, True), ("conv3", 64, 2, 0, False))
HIDDEN = 512


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    """Patch matrix (B*Ho*Wo, 9*C) for an NHWC batch; columns ordered (kh, kw, C)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    b, hp, wp, c = x.shape
    ho = (hp - 3) // stride + 1
    wo = (wp - 3) // stride + 1
    cols = np.empty((b, ho, wo, 3, 3, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = x[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :]
    return cols.reshape(b * ho * wo, 9 * c), ho, wo


def _col2im(dcols: np.ndarray, shape: Tuple[int, ...], ho: int, wo: int, stride: int, pad: int) -> np.ndarray:
    b, h, w, c = shape
    dcols = dcols.reshape(b, ho, wo, 3, 3, c)
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += dcols[:, :, :, ki, kj, :]
    if pad:
        return dxp[:, pad:-pad, pad:-pad, :]
    return dxp


def _wmat(weight: np.ndarray) -> np.ndarray:
    """(F, C, 3, 3) filters as a (F, 9*C) matrix matching the im2col column order."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


class MnistNet:
    def __init__(self, num_classes: int = 10, in_channels: int = 1, input_size: int = 28,
                 dropout: float = 0.5, seed: int = 0, dtype=np.float32):
        if not 0 <= dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        self.num_classes = int(num_classes)
        self.in_channels = int(in_channels)
        self.input_size = int(input_size)
        self.dropout = float(dropout)
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        # Optional 0/1 mask over conv3 output channels, used by pruning.
        self.channel_mask: Optional[np.ndarray] = None
        self._cache: Optional[dict] = None

        rng = np.random.default_rng(self.seed)
        size, cin = self.input_size, self.in_channels
        for name, cout, stride, pad, has_bn in CONV_SPECS:
            fan_in = cin * 9
            bound = math.sqrt(6.0 / fan_in)
            self.params[f"{name}.weight"] = rng.uniform(-bound, bound, (cout, cin, 3, 3))
            self.params[f"{name}.bias"] = np.zeros(cout)
            if has_bn:
                bn = "bn" + name[-1]
                self.params[f"{bn}.weight"] = np.ones(cout)
                self.params[f"{bn}.bias"] = np.zeros(cout)
                self.buffers[f"{bn}.running_mean"] = np.zeros(cout)
                self.buffers[f"{bn}.running_var"] = np.ones(cout)
            size = conv_out_size(size, 3, stride, pad)
            if size < 1:
                raise ConfigError(f"input size {input_size} too small for the conv stack")
            cin = cout
        self.flat_dim = cin * size * size
        for name, fan_in, fan_out in (("fc1", self.flat_dim, HIDDEN), ("fc2", HIDDEN, self.num_classes)):
            bound = math.sqrt(6.0 / fan_in)
            self.params[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in))
            self.params[f"{name}.bias"] = np.zeros(fan_out)
        self.astype(self.dtype)

    def astype(self, dtype) -> "MnistNet":
        self.dtype = np.dtype(dtype)
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = np.ascontiguousarray(store[k], dtype=self.dtype)
        return self

    def copy(self) -> "MnistNet":
        other = object.__new__(MnistNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.channel_mask = None if self.channel_mask is None else self.channel_mask.copy()
        other._cache = None
        return other

    @property
    def conv3_channels(self) -> int:
        return self.params["conv3.weight"].shape[0]

    # ------------------------------------------------------------------ forward

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None,
                keep_cache: bool = True) -> np.ndarray:
        """Return logits for a batch ``x`` of shape (B, C, H, W).

        In train mode batchnorm uses batch statistics (and updates the running
        estimates) and dropout is active, drawing its mask from ``rng``.
        """
        x = np.asarray(x)
        expected = (self.in_channels, self.input_size, self.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ConfigError(f"expected input of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        p = self.params
        cache: dict = {"train": train}
        # Activations are kept channels-last internally.
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        for name, cout, stride, pad, has_bn in CONV_SPECS:
            cols, ho, wo = _im2col(h, stride, pad)
            out = cols @ _wmat(p[f"{name}.weight"]).T
            out += p[f"{name}.bias"]
            out = out.reshape(h.shape[0], ho, wo, cout)
            cache[name] = (cols, h.shape, ho, wo)
            if has_bn:
                out = self._bn_forward("bn" + name[-1], out, train, cache)
            np.maximum(out, 0, out=out)
            if name == "conv3" and self.channel_mask is not None:
                out *= self.channel_mask.astype(self.dtype)
            cache[name + ".relu"] = out
            h = out
        flat = h.reshape(h.shape[0], -1)
        cache["flat"] = flat
        hid = flat @ p["fc1.weight"].T
        hid += p["fc1.bias"]
        np.maximum(hid, 0, out=hid)
        cache["fc1.relu"] = hid
        if train and self.dropout > 0:
            if rng is None:
                raise ConfigError("train-mode forward with dropout needs an rng")
            keep = (rng.random(hid.shape, dtype=np.float32) >= self.dropout).astype(self.dtype)
            keep *= self.dtype.type(1 / (1 - self.dropout))
            cache["dropout"] = keep
            hid = hid * keep
        cache["fc1.out"] = hid
        logits = hid @ p["fc2.weight"].T + p["fc2.bias"]
        self._cache = cache if keep_cache else None
        return logits

    def _bn_forward(self, bn: str, x: np.ndarray, train: bool, cache: dict) -> np.ndarray:
        gamma = self.params[f"{bn}.weight"]
        beta = self.params[f"{bn}.bias"]
        flat = x.reshape(-1, x.shape[-1])
        if train:
            mean = flat.mean(axis=0)
            centered = flat - mean
            var = np.einsum("ij,ij->j", centered, centered) / flat.shape[0]
            n = flat.shape[0]
            rm, rv = self.buffers[f"{bn}.running_mean"], self.buffers[f"{bn}.running_var"]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mean
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * var * (n / max(n - 1, 1))
        else:
            mean = self.buffers[f"{bn}.running_mean"]
            var = self.buffers[f"{bn}.running_var"]
            centered = flat - mean
        inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(self.dtype)
        xhat = centered * inv_std
        cache[bn] = (xhat, inv_std)
        return (xhat * gamma + beta).reshape(x.shape)

    # ----------------------------------------------------------------- backward

    def backward(self, dlogits: np.ndarray, need_input_grad: bool = False,
                 need_param_grads: bool = True) -> Dict[str, np.ndarray]:
        """Backpropagate ``dlogits`` through the cached forward pass.

        Returns parameter gradients keyed like ``params``; when
        ``need_input_grad`` is set the gradient w.r.t. the (B, C, H, W) input is
        stored under the key ``"input"``.
        """
        cache = self._cache
        if cache is None:
            raise StateError("backward called without a cached forward pass")
        p = self.params
        grads: Dict[str, np.ndarray] = {}
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        hid = cache["fc1.out"]
        if need_param_grads:
            grads["fc2.weight"] = dlogits.T @ hid
            grads["fc2.bias"] = dlogits.sum(axis=0)
        dh = dlogits @ p["fc2.weight"]
        if "dropout" in cache:
            dh *= cache["dropout"]
        dh *= cache["fc1.relu"] > 0
        if need_param_grads:
            grads["fc1.weight"] = dh.T @ cache["flat"]
            grads["fc1.bias"] = dh.sum(axis=0)
        d = (dh @ p["fc1.weight"]).reshape(cache["conv3.relu"].shape)

        for i, (name, cout, stride, pad, has_bn) in reversed(list(enumerate(CONV_SPECS))):
            if name == "conv3" and self.channel_mask is not None:
                d *= self.channel_mask.astype(self.dtype)
            d *= cache[name + ".relu"] > 0
            dflat_out = d.reshape(-1, cout)
            if has_bn:
                dflat_out = self._bn_backward("bn" + name[-1], dflat_out, cache, grads, need_param_grads)
            cols, in_shape, ho, wo = cache[name]
            if need_param_grads:
                grads[f"{name}.weight"] = np.ascontiguousarray(
                    (dflat_out.T @ cols).reshape(cout, 3, 3, -1).transpose(0, 3, 1, 2))
                grads[f"{name}.bias"] = dflat_out.sum(axis=0)
            if i == 0 and not need_input_grad:
                break
            dcols = dflat_out @ _wmat(p[f"{name}.weight"])
            d = _col2im(dcols, in_shape, ho, wo, stride, pad)
        if need_input_grad:
            grads["input"] = np.ascontiguousarray(d.transpose(0, 3, 1, 2))
        return grads

    def _bn_backward(self, bn: str, dy: np.ndarray, cache: dict, grads: dict, need_param_grads: bool) -> np.ndarray:
        xhat, inv_std = cache[bn]
        gamma = self.params[f"{bn}.weight"]
        if need_param_grads:
            grads[f"{bn}.weight"] = np.einsum("ij,ij->j", dy, xhat)
            grads[f"{bn}.bias"] = dy.sum(axis=0)
        dxhat = dy * gamma
        if not cache["train"]:
            return dxhat * inv_std
        mean_d = dxhat.mean(axis=0)
        mean_dx = np.einsum("ij,ij->j", dxhat, xhat) / dxhat.shape[0]
        dxhat -= mean_d
        dxhat -= xhat * mean_dx
        dxhat *= inv_std
        return dxhat

    # ---------------------------------------------------------------- inference

    def predict_logits(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size], train=False, keep_cache=False)
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.num_classes), dtype=self.dtype)

    def predict(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        return self.predict_logits(x, batch_size).argmax(axis=1)

    def predict_proba(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        return softmax(self.predict_logits(x, batch_size).astype(np.float64))

    def features(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Penultimate (fc1, post-ReLU) representations in eval mode."""
        outs = []
        for i in range(0, len(x), batch_size):
            self.forward(x[i:i + batch_size], train=False, keep_cache=True)
            outs.append(self._cache["fc1.relu"])
        self._cache = None
        return np.concatenate(outs)

    def conv3_activations(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Post-ReLU conv3 activations (B, C, h, w) in eval mode."""
        outs = []
        for i in range(0, len(x), batch_size):
            self.forward(x[i:i + batch_size], train=False, keep_cache=True)
            outs.append(self._cache["conv3.relu"].transpose(0, 3, 1, 2))
        self._cache = None
        return np.concatenate(outs)


def input_gradient(net: MnistNet, x: np.ndarray, target_class) -> np.ndarray:
    """Gradient of the mean cross-entropy towards ``target_class`` w.r.t. ``x`` (eval mode)."""
    x = np.asarray(x)
    targets = np.broadcast_to(np.asarray(target_class), (x.shape[0],))
    if np.any(targets < 0) or np.any(targets >= net.num_classes):
        raise ConfigError(f"target class out of range [0, {net.num_classes})")
    logits = net.forward(x, train=False)
    _, dlogits = cross_entropy(logits, targets)
    return net.backward(dlogits, need_input_grad=True, need_param_grads=False)["input"]


# --------------------------------------------------------------------- optimizer

@dataclass
class SgdState:
    learning_rate: float = 0.01
    decay_epochs: int = 100
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    epoch: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate / self.decay_factor ** (epoch // self.decay_epochs)

    @property
    def current_lr(self) -> float:
        return self.lr_at(self.epoch)


def sgd_step(net: MnistNet, grads: Dict[str, np.ndarray], state: SgdState) -> MnistNet:
    """In-place momentum SGD update of ``net.params``; returns ``net``."""
    lr = net.dtype.type(state.current_lr)
    mu = net.dtype.type(state.momentum)
    wd = net.dtype.type(state.weight_decay)
    for name, g in grads.items():
        if name not in net.params:
            continue
        param = net.params[name]
        if g.shape != param.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, expected {param.shape}")
        if wd:
            g = g + wd * param
        if state.momentum:
            v = state.velocity.get(name)
            if v is None:
                v = np.array(g, dtype=net.dtype, copy=True)
            else:
                v *= mu
                v += g
            state.velocity[name] = v
            step = v
        else:
            step = g
        param -= lr * step
    return net


# -------------------------------------------------------------------- checkpoint

def _shape_str(shape: Iterable[int]) -> str:
    return "x".join(str(int(s)) for s in shape) or "scalar"


def _parse_shape(text: str) -> Tuple[int, ...]:
    if text == "scalar":
        return ()
    return tuple(int(s) for s in text.split("x"))


def save_checkpoint(net: MnistNet, path, epoch: int = 0, seeds: Optional[Dict[str, int]] = None,
                    metrics: Optional[Dict[str, float]] = None) -> None:
    """Write ``net`` as a WACK file: header, key/value manifest, float32 payload."""
    names: List[str] = list(PARAM_ORDER) + list(BUFFER_ORDER)
    arrays = [net.params[n] if n in net.params else net.buffers[n] for n in names]
    lines = [
        "manifest_version = 1",
        f"architecture = {ARCH_ID}",
        f"num_classes = {net.num_classes}",
        f"in_channels = {net.in_channels}",
        f"input_size = {net.input_size}",
        f"dropout = {net.dropout!r}",
        f"init_seed = {net.seed}",
        f"epoch = {int(epoch)}",
        "dtype = float32-le",
        "arrays = " + ",".join(names),
    ]
    lines += [f"shape.{n} = {_shape_str(a.shape)}" for n, a in zip(names, arrays)]
    for key, value in sorted((seeds or {}).items()):
        lines.append(f"seed.{key} = {int(value)}")
    for key, value in sorted((metrics or {}).items()):
        lines.append(f"metric.{key} = {float(value)!r}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    header = WACK_MAGIC + struct.pack("<HI", WACK_VERSION, len(manifest))
    Path(path).write_bytes(header + manifest + payload)


def read_manifest(data: bytes) -> Tuple[Dict[str, str], int]:
    if len(data) < 10:
        raise FormatError("checkpoint shorter than its header")
    if data[:4] != WACK_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    version, length = struct.unpack_from("<HI", data, 4)
    if version != WACK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    end = 10 + length
    if len(data) < end:
        raise FormatError("checkpoint manifest is truncated")
    try:
        text = data[10:end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"checkpoint manifest is not UTF-8: {exc}") from None
    manifest = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"malformed manifest line {line!r}")
        manifest[key] = value
    return manifest, end


def load_checkpoint(path) -> MnistNet:
    net, _ = load_checkpoint_with_manifest(path)
    return net


def load_checkpoint_with_manifest(path) -> Tuple[MnistNet, Dict[str, str]]:
    data = Path(path).read_bytes()
    manifest, offset = read_manifest(data)
    if manifest.get("manifest_version") != "1" or manifest.get("architecture") != ARCH_ID:
        raise FormatError(f"unsupported checkpoint architecture {manifest.get('architecture')!r}")
    try:
        net = MnistNet(num_classes=int(manifest["num_classes"]), in_channels=int(manifest["in_channels"]),
                       input_size=int(manifest["input_size"]), dropout=float(manifest["dropout"]),
                       seed=int(manifest["init_seed"]))
        names = manifest["arrays"].split(",")
        shapes = [_parse_shape(manifest[f"shape.{n}"]) for n in names]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"incomplete checkpoint manifest: {exc}") from None
    total = sum(int(np.prod(s)) for s in shapes) * 4
    if len(data) - offset != total:
        raise FormatError(f"checkpoint payload is {len(data) - offset} bytes, expected {total}")
    for name, shape in zip(names, shapes):
        store = net.params if name in net.params else net.buffers if name in net.buffers else None
        if store is None or store[name].shape != shape:
            raise FormatError(f"unexpected array {name} with shape {shape}")
        count = int(np.prod(shape))
        store[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += count * 4
    return net, manifest
