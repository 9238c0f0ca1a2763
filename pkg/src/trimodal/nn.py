"""Layer and module containers on top of the autograd engine.

Modules own named ``Parameter`` leaves, support state-dict round trips,
and can be promoted to float64 for gradient verification.  Weight init
is explicit: every layer takes an ``rng`` (numpy Generator), so a model
built twice from the same seed has byte-identical parameters.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, conv3d, conv_transpose3d, matmul


class Parameter(Tensor):
    """Trainable tensor (requires_grad is always on)."""

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


def kaiming_uniform(rng, shape, fan_in):
    """He-style uniform init, bound sqrt(3 / fan_in) (suits relu-family nets)."""
    bound = float(np.sqrt(3.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def bias_uniform(rng, n, fan_in):
    # Nonzero bias keeps features off exact zero even for all-zero input
    # (zero-filled missing volumes reach the encoders in ablation modes).
    bound = float(1.0 / np.sqrt(fan_in))
    return rng.uniform(-bound, bound, size=n).astype(np.float32)


class Module:
    """Base container: parameter discovery, state dicts, dtype promotion."""

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{full}.{i}."))
                    elif isinstance(item, Parameter):
                        out.append((f"{full}.{i}", item))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state dict mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: have {p.data.shape}, loading {arr.shape}")
            p.data = arr.copy()

    def to_dtype(self, dtype):
        """Promote all parameters in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Dense map y = x W + b (W stored [in, out])."""

    def __init__(self, rng, in_features, out_features, bias=True):
        self.weight = Parameter(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(bias_uniform(rng, out_features, in_features)) if bias else None

    def forward(self, x):
        if x.ndim == 1:
            y = matmul(x.reshape(1, -1), self.weight).reshape(-1)
        else:
            y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv3d(Module):
    """3-d convolution layer, kernel [out_ch, in_ch, k, k, k]."""

    def __init__(self, rng, in_ch, out_ch, k, stride=1, padding=0, bias=True):
        fan_in = in_ch * k ** 3
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, k, k, k), fan_in))
        self.bias = Parameter(bias_uniform(rng, out_ch, fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        y = conv3d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1, 1)
        return y


class ConvTranspose3d(Module):
    """Transposed 3-d convolution layer, kernel [in_ch, out_ch, k, k, k]."""

    def __init__(self, rng, in_ch, out_ch, k, stride=1, padding=0, bias=True):
        fan_in = in_ch * k ** 3
        self.weight = Parameter(kaiming_uniform(rng, (in_ch, out_ch, k, k, k), fan_in))
        self.bias = Parameter(bias_uniform(rng, out_ch, fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        y = conv_transpose3d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1, 1)
        return y


class LayerNorm(Module):
    """Normalize the last axis to zero mean / unit variance, then affine."""

    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = xc.square().mean(axis=-1, keepdims=True)
        xhat = xc / (var + self.eps).sqrt()
        return xhat * self.gamma + self.beta


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
