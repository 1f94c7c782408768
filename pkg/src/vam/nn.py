"""Network building blocks: modules, transformer layers, time conditioning, LoRA.

Everything is built on `vam.autodiff.Tensor`. Parameters default to float32;
passing dtype=np.float64 at construction puts the whole module in double
precision (used by the finite-difference gradient checks).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor


class Parameter(Tensor):
    """A trainable tensor. Freezing clears both `trainable` and `requires_grad`."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True):
        super().__init__(np.asarray(data), requires_grad=trainable)
        self.trainable = trainable

    def freeze(self):
        self.trainable = False
        self.requires_grad = False


def trunc_normal(shape, std, rng, dtype=np.float32):
    """Normal(0, std) initializer truncated to +-2 std."""
    x = rng.standard_normal(shape) * std
    return np.clip(x, -2.0 * std, 2.0 * std).astype(dtype)


class Module:
    """Container with automatic parameter/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def params_hash(self):
        """Order-stable digest of all parameter values (frozen-weights checks)."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """Affine map over the last axis, weight stored (out, in)."""

    def __init__(self, d_in, d_out, rng=None, bias=True, std=0.02, zero_init=False,
                 dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_out, d_in), dtype=dtype)
        else:
            w = trunc_normal((d_out, d_in), std, rng, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None
        self.lora = None

    def attach_lora(self, rank, alpha, rng):
        self.lora = LoraAdapter(self.d_in, self.d_out, rank, alpha, rng,
                                dtype=self.weight.data.dtype)
        self._modules["lora"] = self.lora
        return self.lora

    def effective_weight(self):
        if self.lora is None:
            return self.weight
        return lora_apply(self.weight, self.lora)

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"linear expects last dim {self.d_in}, got {x.shape}")
        y = x.matmul(self.effective_weight().transpose())
        if self.bias is not None:
            y = y + self.bias
        return y


class LoraAdapter(Module):
    """Low-rank additive adapter: effective W = W + (alpha/rank) * B @ A.

    B starts at zero so a fresh adapter leaves the layer bit-identical.
    """

    def __init__(self, d_in, d_out, rank, alpha, rng, dtype=np.float32):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.rank = rank
        self.alpha = float(alpha)
        self.a = Parameter(trunc_normal((rank, d_in), 0.02, rng, dtype))
        self.b = Parameter(np.zeros((d_out, rank), dtype=dtype))

    def delta(self):
        return self.b.matmul(self.a) * (self.alpha / self.rank)


def lora_apply(weight, adapter):
    """Base weight plus the adapter's scaled low-rank update."""
    w = weight if isinstance(weight, Tensor) else Tensor(weight)
    d_out, d_in = w.shape
    if adapter.a.shape[1] != d_in or adapter.b.shape[0] != d_out:
        raise ValueError(
            f"adapter shapes A{adapter.a.shape}/B{adapter.b.shape} do not compose with W{w.shape}")
    return w + adapter.delta()


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    return x.normalize_last(eps) * gain + bias


class LayerNorm(Module):
    def __init__(self, d, affine=True, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.affine = affine
        if affine:
            self.gain = Parameter(np.ones(d, dtype=dtype))
            self.bias = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        xhat = x.normalize_last(self.eps)
        if self.affine:
            return xhat * self.gain + self.bias
        return xhat


def attention(q, k, v, n_heads, out_proj):
    """Multi-head scaled dot-product attention core.

    q: (..., Tq, d), k/v: (..., Tk, d) with matching leading dims. Heads are
    split from the channel axis, attended independently, concatenated, and
    passed through `out_proj`.
    """
    if not isinstance(q, Tensor):
        q = Tensor(q)
    if not isinstance(k, Tensor):
        k = Tensor(k)
    if not isinstance(v, Tensor):
        v = Tensor(v)
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    out = out_proj(q.scaled_dot_attention(k, v, n_heads))
    if squeeze:
        out = out.reshape(out.shape[1], d)
    return out


class MultiheadAttention(Module):
    """Projection wrapper around the attention core; kv_dim enables cross-attention."""

    def __init__(self, d, n_heads, rng, kv_dim=None, dtype=np.float32):
        super().__init__()
        kv_dim = d if kv_dim is None else kv_dim
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng, dtype=dtype)
        self.wk = Linear(kv_dim, d, rng, dtype=dtype)
        self.wv = Linear(kv_dim, d, rng, dtype=dtype)
        self.wo = Linear(d, d, rng, dtype=dtype)

    def __call__(self, x, kv=None):
        kv = x if kv is None else kv
        return attention(self.wq(x), self.wk(kv), self.wv(kv), self.n_heads, self.wo)


def apply_activation(x, kind):
    if kind == "silu":
        return x.silu()
    if kind == "gelu_tanh":
        inner = (x + x.pow(3) * 0.044715) * np.sqrt(2.0 / np.pi)
        return x * (inner.tanh() + 1.0) * 0.5
    if kind == "tanh":
        return x.tanh()
    raise ValueError(f"unknown activation {kind!r}")


class Mlp(Module):
    """Two-layer MLP with 4x hidden width by default."""

    def __init__(self, d, rng, hidden=None, act="silu", d_out=None, dtype=np.float32):
        super().__init__()
        hidden = 4 * d if hidden is None else hidden
        self.act = act
        self.fc1 = Linear(d, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, d_out if d_out is not None else d, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(apply_activation(self.fc1(x), self.act))


def flowtime_embed(tau, d_t, min_freq=1.0, max_freq=1000.0):
    """Sinusoidal features of a flow time in [0, 1].

    Returns [sin(w_i tau), cos(w_i tau)] with d_t/2 geometrically spaced
    frequencies. Accepts a scalar -> (d_t,) or a batch (B,) -> (B, d_t).
    """
    if d_t % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {d_t}")
    half = d_t // 2
    freqs = min_freq * (max_freq / min_freq) ** (np.arange(half) / max(half - 1, 1))
    t = np.asarray(tau, dtype=np.float64)
    scalar = t.ndim == 0
    phase = t.reshape(-1, 1) * freqs
    emb = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
    return emb[0] if scalar else emb


class FlowTimeConditioner(Module):
    """Sinusoidal embedding followed by a small MLP, for single-time AdaLN input."""

    def __init__(self, d_t, d_c, rng, act="silu", dtype=np.float32):
        super().__init__()
        self.d_t = d_t
        self.dtype = dtype
        self.act = act
        self.fc1 = Linear(d_t, d_c, rng, dtype=dtype)
        self.fc2 = Linear(d_c, d_c, rng, dtype=dtype)

    def __call__(self, tau):
        emb = Tensor(flowtime_embed(tau, self.d_t).astype(self.dtype))
        return self.fc2(apply_activation(self.fc1(emb), self.act))


class BilinearTimeCond(Module):
    """Joint encoding of two flow times: affine in each embedded time plus a
    rank-r bilinear interaction.

        c = Wv phi(tau_v) + Wa phi(tau_a) + P((U phi(tau_v)) * (W phi(tau_a))) + b
    """

    def __init__(self, d_t, d_c, rank, rng, dtype=np.float32):
        super().__init__()
        if rank < 0:
            raise ValueError(f"rank must be >= 0, got {rank}")
        self.d_t = d_t
        self.rank = rank
        self.dtype = dtype
        self.affine_v = Linear(d_t, d_c, rng, bias=False, dtype=dtype)
        self.affine_a = Linear(d_t, d_c, rng, bias=False, dtype=dtype)
        self.bias = Parameter(np.zeros(d_c, dtype=dtype))
        if rank > 0:
            self.u = Linear(d_t, rank, rng, bias=False, dtype=dtype)
            self.w = Linear(d_t, rank, rng, bias=False, dtype=dtype)
            self.proj = Linear(rank, d_c, rng, bias=False, dtype=dtype)

    def __call__(self, tau_v, tau_a):
        ev = Tensor(flowtime_embed(tau_v, self.d_t).astype(self.dtype))
        ea = Tensor(flowtime_embed(tau_a, self.d_t).astype(self.dtype))
        c = self.affine_v(ev) + self.affine_a(ea) + self.bias
        if self.rank > 0:
            c = c + self.proj(self.u(ev) * self.w(ea))
        return c


def modulate(h, pre_scale, pre_shift):
    """AdaLN input modulation: h * (1 + scale) + shift."""
    return h * (pre_scale + 1.0) + pre_shift


class AdaLNZero(Module):
    """Zero-initialized projection from a conditioning vector to per-sub-block
    (pre_scale, pre_shift, gate) triples; a fresh block is the identity map.
    """

    def __init__(self, d_c, d, n_subblocks, rng, dtype=np.float32):
        super().__init__()
        self.d = d
        self.n_subblocks = n_subblocks
        self.proj = Linear(d_c, 3 * n_subblocks * d, rng, zero_init=True, dtype=dtype)

    def __call__(self, cond):
        """cond: (B, d_c) -> list of (pre_scale, pre_shift, gate), each (B, 1, d)."""
        m = self.proj(cond)
        b = m.shape[0] if m.ndim == 2 else 1
        m = m.reshape(b, 1, 3 * self.n_subblocks, self.d)
        out = []
        for i in range(self.n_subblocks):
            out.append((m[:, :, 3 * i, :], m[:, :, 3 * i + 1, :], m[:, :, 3 * i + 2, :]))
        return out
