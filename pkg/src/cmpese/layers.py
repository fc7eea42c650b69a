"""Parameter-owning building blocks on top of the tensor core.

A Module keeps explicit registries of parameters, buffers, and children;
no metaclass or attribute magic. Weight decay eligibility is recorded per
parameter at registration time (convolution and fully-connected weights
decay; batch-norm affine parameters and biases do not).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Module:
    def __init__(self):
        self._params = {}   # name -> (Tensor, decay: bool)
        self._buffers = {}  # name -> Tensor
        self._children = {}
        self.training = True

    def param(self, name, data, decay):
        t = Tensor(np.asarray(data), requires_grad=True, name=name)
        self._params[name] = (t, decay)
        return t

    def buffer(self, name, data):
        t = Tensor(np.asarray(data), requires_grad=False, name=name)
        self._buffers[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, (t, _) in self._params.items():
            yield prefix + name, t
        for cname, c in self._children.items():
            yield from c.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def decay_flags(self, prefix=""):
        flags = {}
        for name, (_, d) in self._params.items():
            flags[prefix + name] = d
        for cname, c in self._children.items():
            flags.update(c.decay_flags(prefix + cname + "."))
        return flags

    def named_buffers(self, prefix=""):
        for name, t in self._buffers.items():
            yield prefix + name, t
        for cname, c in self._children.items():
            yield from c.named_buffers(prefix + cname + ".")

    def train(self, mode=True):
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        state = {}
        for name, t in self.named_parameters():
            state[name] = t.data
        for name, t in self.named_buffers():
            state[name] = t.data
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        own.update(dict(self.named_buffers()))
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(
                "load_state_dict",
                f"state mismatch; missing={missing[:4]} extra={extra[:4]}",
            )
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ShapeError(
                    "load_state_dict",
                    f"{name}: stored shape {arr.shape} != model shape {t.data.shape}",
                )
            t.data[...] = arr.astype(t.data.dtype)

    def param_count(self):
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    """Bias-free 2-D convolution; kernels are (kh, kw, cin, cout).

    He initialization scaled by fan-out (kh*kw*cout), the usual choice for
    residual stacks feeding batch norm.
    """

    def __init__(self, cin, cout, kernel_size, stride=1, padding=0, rng=None,
                 dtype=np.float32):
        super().__init__()
        kh = kw = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / (kh * kw * cout))
        self.weight = self.param(
            "weight", (rng.standard_normal((kh, kw, cin, cout)) * std).astype(dtype),
            decay=True,
        )

    def forward(self, x):
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    __call__ = forward


class Linear(Module):
    """y = x @ W.T + b with W of shape (out, in)."""

    def __init__(self, in_features, out_features, bias=True, rng=None,
                 dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / in_features)
        self.weight = self.param(
            "weight", (rng.standard_normal((out_features, in_features)) * std).astype(dtype),
            decay=True,
        )
        self.bias = None
        if bias:
            self.bias = self.param("bias", np.zeros(out_features, dtype=dtype), decay=False)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    __call__ = forward


class BatchNorm2d(Module):
    """Batch normalization over all axes but channels (works on 2-D, 3-D or
    4-D inputs with channels last). Biased batch variance; running buffers
    blended with momentum 0.9."""

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype), decay=False)
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype), decay=False)
        self.running_mean = self.buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )

    __call__ = forward
