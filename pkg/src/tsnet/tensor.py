"""Minimal dense-tensor reverse-mode autodiff core.

Float64 throughout. The op set is exactly what the two-stream regressor needs:
conv2d (cross-correlation), relu, global average pooling, dense, elementwise
multiplication (fusion), inverted dropout, mse, plus the scalar glue (add,
scale, tsum, take_column) required to assemble the multitask loss. Gradients
accumulate across backward calls; zeroing is explicit.
"""

import numpy as np

__all__ = [
    "Tensor", "backward", "conv2d", "relu", "global_avg_pool", "dense",
    "elementwise_mul", "dropout", "mse", "tsum", "add", "scale",
    "take_column", "grad_check", "AdamState", "adam_step", "Adam",
]


class Tensor:
    """N-d float64 array holding a value and, after backward, its gradient.

    Interior nodes keep references to their parents and a function mapping the
    output gradient to parent gradients. Gradients accumulate: repeated
    backward calls without zero_grad add up (documented contract).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._grad_fn = _grad_fn

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.data.shape, self.requires_grad)


def _node(data, parents, grad_fn):
    # Interior node participates in the graph iff some ancestor wants gradients.
    track = any(p.requires_grad or p._grad_fn is not None for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=False, _parents=parents, _grad_fn=grad_fn)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss):
    """Reverse-mode accumulation from a scalar root.

    Fills .grad on every requires_grad ancestor, adding to whatever is already
    there. Traversal order is a fixed topological order, so reductions are
    deterministic and runs are bit-reproducible.
    """
    if loss.data.size != 1:
        raise ValueError("backward root must be scalar, got shape %s" % (loss.data.shape,))
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# ops


def conv2d(x, w, b, stride=1, padding=0):
    """2-d cross-correlation (no kernel flip) with zero padding.

    x: (N, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,).
    Output spatial size is floor((H + 2 pad - kh) / stride) + 1.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4:
        raise ValueError("conv2d input must be 4-d (N,Cin,H,W), got %d-d" % x.data.ndim)
    if w.data.ndim != 4:
        raise ValueError("conv2d weight must be 4-d (Cout,Cin,kh,kw), got %d-d" % w.data.ndim)
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError("conv2d channel mismatch: input Cin=%d, weight Cin=%d" % (cin, cin_w))
    if b.data.shape != (cout,):
        raise ValueError("conv2d bias must have shape (%d,), got %s" % (cout, b.data.shape))
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError("conv2d kernel %dx%d exceeds padded input %dx%d"
                         % (kh, kw, h + 2 * padding, wd + 2 * padding))

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (N,Cin,Ho,Wo,kh,kw)
    ho, wo = win.shape[2], win.shape[3]
    # Stacked per-sample matmul keeps each sample's arithmetic independent of
    # batch size, so batched and looped forward passes agree bit for bit.
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, cin * kh * kw)
    out = np.matmul(cols, w.data.reshape(cout, -1).T)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def grad_fn(g):
        gc = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gc.T @ cols.reshape(n * ho * wo, -1)).reshape(w.data.shape)
        gb = g.sum(axis=(0, 2, 3))
        dcols = (gc @ w.data.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j]
        if padding:
            gx = dxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = dxp
        return gx, gw, gb

    return _node(out, (x, w, b), grad_fn)


def relu(x):
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def global_avg_pool(x):
    """(N,C,H,W) -> (N,C), mean over the spatial extent of each channel."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("global_avg_pool expects (N,C,H,W), got %d-d" % x.data.ndim)
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None], x.data.shape) / (h * w),)

    return _node(out, (x,), grad_fn)


def dense(x, w, b):
    """Affine layer: (N,Din) @ (Dout,Din)^T + (Dout,) -> (N,Dout)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError("dense expects 2-d x and w, got %d-d and %d-d"
                         % (x.data.ndim, w.data.ndim))
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError("dense inner dimension mismatch: x Din=%d, w Din=%d"
                         % (x.data.shape[1], w.data.shape[1]))
    if b.data.shape != (w.data.shape[0],):
        raise ValueError("dense bias must have shape (%d,), got %s"
                         % (w.data.shape[0], b.data.shape))
    # Fixed-order einsum so each row's dot product is independent of the
    # batch size (bitwise batched == looped), unlike a blocked gemm.
    out = np.einsum("nd,od->no", x.data, w.data) + b.data

    def grad_fn(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _node(out, (x, w, b), grad_fn)


def elementwise_mul(a, b):
    """Hadamard product of two same-shape tensors (the fusion layer)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError("elementwise_mul shape mismatch: %s vs %s"
                         % (a.data.shape, b.data.shape))
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def dropout(x, p, training, rng_seed=0):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode (training=False) and p=0 are the exact identity. The mask is a
    pure function of rng_seed, so a fixed seed gives a fixed mask.
    """
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must be in [0,1), got %r" % (p,))
    if not training or p == 0.0:
        return _node(x.data, (x,), lambda g: (g,))
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def mse(pred, target):
    """Mean squared error; gradient w.r.t. pred is 2 (pred - target) / N."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError("mse length mismatch: pred %s vs target %s"
                         % (pred.data.shape, target.data.shape))
    if pred.data.size == 0:
        raise ValueError("mse over empty tensors")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean())

    def grad_fn(g):
        s = 2.0 * float(g) / n
        return s * diff, -s * diff

    return _node(out, (pred, target), grad_fn)


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    return _node(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.data.shape),))


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError("add shape mismatch: %s vs %s" % (a.data.shape, b.data.shape))
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x, alpha):
    """Multiply by a python scalar."""
    x = _as_tensor(x)
    alpha = float(alpha)
    return _node(alpha * x.data, (x,), lambda g: (alpha * g,))


def take_column(x, j):
    """Select column j of a (N,D) tensor as a (N,) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("take_column expects a 2-d tensor, got %d-d" % x.data.ndim)
    if not 0 <= j < x.data.shape[1]:
        raise ValueError("take_column index %d out of range for %d columns"
                         % (j, x.data.shape[1]))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, j] = g
        return (gx,)

    return _node(x.data[:, j].copy(), (x,), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, theta, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    f must be a pure scalar function of theta (rebuilding its graph per call).
    Relative error per coordinate is |a - n| / max(1e-12, |a| + |n|).
    """
    theta.grad = None
    loss = f(theta)
    backward(loss)
    analytic = (theta.grad if theta.grad is not None else np.zeros_like(theta.data)).ravel()

    flat = theta.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = float(f(theta).data)
        flat[i] = saved - eps
        fm = float(f(theta).data)
        flat[i] = saved
        numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """Per-parameter Adam buffers: first/second moments and step counter."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(theta, grad, state, lr):
    """One bias-corrected Adam update, in place on theta.data."""
    if lr <= 0:
        raise ValueError("adam_step lr must be positive, got %r" % (lr,))
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != theta.data.shape:
        raise ValueError("adam_step grad shape %s does not match theta %s"
                         % (g.shape, theta.data.shape))
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    theta.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta, state


class Adam:
    """Adam over a list of parameter tensors; missing grads count as zero."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("Adam lr must be positive, got %r" % (lr,))
        self.params = list(params)
        self.lr = lr
        self.states = [AdamState(p.data.shape, beta1, beta2, eps) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, st in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, g, st, self.lr)
