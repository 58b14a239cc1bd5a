"""A small tape-based reverse-mode autodiff engine and the layers the acoustic model needs.

Tensors hold float64 arrays shaped (batch, time, dim) or lower rank. Each op records its
parents and a closure that pushes the output gradient back; ``Tensor.backward`` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node.parents)
        self._accumulate(np.broadcast_to(grad, self.shape))
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _push(t: Tensor, g):
    if t.requires_grad:
        t._accumulate(g)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def back(g):
        _push(a, g)
        _push(b, g)

    return Tensor(a.value + b.value, parents=(a, b), backward_fn=back)


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or broadcastable array."""
    return Tensor(a.value * c, parents=(a,), backward_fn=lambda g: _push(a, g * c))


def add_constant(a: Tensor, c) -> Tensor:
    return Tensor(a.value + c, parents=(a,), backward_fn=lambda g: _push(a, g))


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")

    def back(g):
        if x.requires_grad:
            _push(x, g @ W.value.T)
        flat_x = x.value.reshape(-1, x.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        _push(W, flat_x.T @ flat_g)
        _push(b, flat_g.sum(0))

    return Tensor(x.value @ W.value + b.value, parents=(x, W, b), backward_fn=back)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), parents=(x,), backward_fn=lambda g: _push(x, g * mask))


def splice(x: Tensor, offsets) -> Tensor:
    """(B, T, D) -> (B, T, len(offsets)*D), frame t gets x[t+o] with edge frames replicated."""
    if x.value.ndim != 3:
        raise ShapeError("splice expects (batch, time, dim)")
    B, T, D = x.shape
    offsets = list(offsets)
    idx = [np.clip(np.arange(T) + o, 0, T - 1) for o in offsets]
    out = np.concatenate([x.value[:, i, :] for i in idx], axis=-1)

    def back(g):
        gx = np.zeros_like(x.value)
        for k, o in enumerate(offsets):
            gk = g[:, :, k * D:(k + 1) * D]
            n = max(T - abs(o), 0)
            if o >= 0:
                gx[:, o:o + n] += gk[:, :n]
                if o:
                    gx[:, T - 1] += gk[:, n:].sum(1)
            else:
                gx[:, :n] += gk[:, T - n:]
                gx[:, 0] += gk[:, :T - n].sum(1)
        _push(x, gx)

    return Tensor(out, parents=(x,), backward_fn=back)


def concat(parts, axis=-1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        for p, gp in zip(parts, np.split(g, cuts, axis=axis)):
            _push(p, gp)

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), parents=tuple(parts), backward_fn=back)


def crop(x: Tensor, start: int, length: int) -> Tensor:
    """Slice ``length`` frames from axis 1."""

    def back(g):
        gx = np.zeros_like(x.value)
        gx[:, start:start + length] = g
        _push(x, gx)

    return Tensor(x.value[:, start:start + length], parents=(x,), backward_fn=back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.value - x.value.max(-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(-1, keepdims=True))
    p = np.exp(out)
    return Tensor(out, parents=(x,),
                  backward_fn=lambda g: _push(x, g - p * g.sum(-1, keepdims=True)))


def custom_loss(x: Tensor, value: float, grad_wrt_x: np.ndarray) -> Tensor:
    """Scalar node with an externally computed value and gradient (e.g. graph-based losses)."""
    grad_wrt_x = np.asarray(grad_wrt_x, dtype=np.float64)
    if grad_wrt_x.shape != x.shape:
        raise ShapeError("custom_loss gradient shape mismatch")
    return Tensor(np.array(value), parents=(x,), backward_fn=lambda g: _push(x, g * grad_wrt_x))


def nll_loss(logp: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Summed negative log-probability of integer targets over all (masked-in) frames."""
    targets = np.asarray(targets)
    if targets.shape != logp.shape[:-1]:
        raise ShapeError("targets must match leading dims of log-probabilities")
    if targets.size and (targets.min() < 0 or targets.max() >= logp.shape[-1]):
        raise ShapeError("target state id out of range")
    m = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    picked = np.take_along_axis(logp.value, targets[..., None], -1)[..., 0]

    def back(g):
        gx = np.zeros_like(logp.value)
        np.put_along_axis(gx, targets[..., None], (-m * g)[..., None], -1)
        _push(logp, gx)

    return Tensor(np.array(-(picked * m).sum()), parents=(logp,), backward_fn=back)


def sum_squared_error(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Sum over frames of squared 2-norms ||pred - target||^2."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"sum_squared_error: {pred.shape} vs {target.shape}")
    m = np.ones(target.shape[:-1]) if mask is None else np.asarray(mask, dtype=np.float64)
    diff = (pred.value - target) * m[..., None]
    return Tensor(np.array((diff ** 2).sum()), parents=(pred,), backward_fn=lambda g: _push(pred, 2 * g * diff))


# ---------------------------------------------------------------- layers


class Module:
    """Parameters are Tensors registered in ``self.params``; non-trained state in ``self.buffers``."""

    def __init__(self):
        self.params: dict = {}
        self.buffers: dict = {}
        self.children: dict = {}

    def named_parameters(self, prefix=""):
        for k, p in self.params.items():
            yield prefix + k, p
        for name, c in self.children.items():
            yield from c.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, b in self.buffers.items():
            yield prefix + k, b
        for name, c in self.children.items():
            yield from c.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        for c in self.children.values():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_arrays(self) -> dict:
        out = {f"param/{k}": p.value for k, p in self.named_parameters()}
        out.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return out

    def load_state_arrays(self, arrays: dict):
        for k, p in self.named_parameters():
            v = arrays[f"param/{k}"]
            if v.shape != p.value.shape:
                raise ShapeError(f"{k}: checkpoint {v.shape} vs model {p.value.shape}")
            p.value = np.array(v, dtype=np.float64)
        for k, b in self.named_buffers():
            b[...] = arrays[f"buffer/{k}"]


class Affine(Module):
    def __init__(self, din, dout, rng, gain=2.0, bias=True):
        super().__init__()
        self.params["weight"] = parameter(rng.normal(0, np.sqrt(gain / din), (din, dout)))
        if bias:
            self.params["bias"] = parameter(np.zeros(dout))
        self.dout = dout

    def __call__(self, x):
        b = self.params.get("bias")
        if b is None:
            b = Tensor(np.zeros(self.dout))
        return affine(x, self.params["weight"], b)


class BatchNorm(Module):
    """Per-dim normalization over all (batch, time) frames with learned scale/offset.

    Training mode uses minibatch statistics and updates running averages; eval mode
    uses the frozen running statistics.
    """

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        super().__init__()
        self.params["gamma"] = parameter(np.ones(dim))
        self.params["beta"] = parameter(np.zeros(dim))
        self.buffers["running_mean"] = np.zeros(dim)
        self.buffers["running_var"] = np.ones(dim)
        self.momentum, self.eps = momentum, eps
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        gamma, beta = self.params["gamma"], self.params["beta"]
        axes = tuple(range(x.value.ndim - 1))
        if self.training:
            mean = x.value.mean(axes)
            var = x.value.var(axes)
            n = x.value.size // x.shape[-1]
            self.buffers["running_mean"] *= 1 - self.momentum
            self.buffers["running_mean"] += self.momentum * mean
            self.buffers["running_var"] *= 1 - self.momentum
            self.buffers["running_var"] += self.momentum * var * n / max(n - 1, 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.value - mean) * inv
        training = self.training

        def back(g):
            gamma._accumulate((g * xhat).sum(axes))
            beta._accumulate(g.sum(axes))
            if not x.requires_grad:
                return
            gx = g * gamma.value
            if training:
                gx = inv * (gx - gx.mean(axes) - xhat * (gx * xhat).mean(axes))
            else:
                gx = gx * inv
            _push(x, gx)

        return Tensor(xhat * gamma.value + beta.value, parents=(x, gamma, beta), backward_fn=back)


class TdnnLayer(Module):
    """Splice at the given offsets, affine, batch norm, ReLU.

    The affine has no bias: batch norm's offset makes it redundant (and its gradient is
    identically zero in training mode).
    """

    def __init__(self, din, dout, offsets, rng):
        super().__init__()
        offsets = tuple(int(o) for o in offsets)
        if list(offsets) != sorted(set(offsets)):
            raise ValueError("splice offsets must be sorted and unique")
        self.offsets = offsets
        self.children["affine"] = Affine(din * len(offsets), dout, rng, bias=False)
        self.children["norm"] = BatchNorm(dout)

    def __call__(self, x):
        h = splice(x, self.offsets) if self.offsets != (0,) else x
        return relu(self.children["norm"](self.children["affine"](h)))


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, decay=0.95):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.decay = lr, betas, eps, decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0
        self.skipped = 0

    def step(self, grads=None) -> bool:
        """Apply one update; returns False (and counts a skip) if any gradient is non-finite."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def end_epoch(self):
        self.lr *= self.decay


# ---------------------------------------------------------------- testing utilities


def grad_check(closure, params, h=1e-4, num_coords=50, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``closure()`` returns (loss, [grad per param]); it is re-evaluated with single
    coordinates perturbed in place. Coordinates are drawn at random across all params.
    """
    _, analytic = closure()
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(num_coords, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        i = flat - (bounds[k - 1] if k else 0)
        view = params[k].reshape(-1)
        old = view[i]
        view[i] = old + h
        fp = closure()[0]
        view[i] = old - h
        fm = closure()[0]
        view[i] = old
        n = (fp - fm) / (2 * h)
        a = analytic[k].reshape(-1)[i]
        worst = max(worst, abs(a - n) / max(1e-8, abs(a) + abs(n)))
    return float(worst)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, modules: dict, meta: dict | None = None) -> None:
    """Write named modules' parameters and buffers to one npz with a JSON layer manifest."""
    arrays, manifest = {}, {"version": CHECKPOINT_VERSION, "meta": meta or {}, "layers": {}}
    for name, mod in modules.items():
        if mod is None:
            continue
        st = mod.state_arrays()
        manifest["layers"][name] = {k: list(v.shape) for k, v in st.items()}
        arrays.update({f"{name}::{k}": v for k, v in st.items()})
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_manifest(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__manifest__"]).decode())


def load_checkpoint(path, modules: dict) -> dict:
    """Restore modules in place; returns the manifest's meta dict."""
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        for name, mod in modules.items():
            if mod is None:
                continue
            if name not in manifest["layers"]:
                raise KeyError(f"checkpoint has no layer group {name!r}")
            prefix = f"{name}::"
            mod.load_state_arrays({k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)})
    return manifest["meta"]
