"""Neighborhood attention over 2-D maps with border-clamped windows.

Two interchangeable backends compute the same function: a compiled Cython
kernel (``_na_ext``) and a pure-torch gather implementation. The compiled
kernel is picked at import when it is importable; set
``JOINTFUSE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import torch

from .errors import ConfigError

try:
    if os.environ.get("JOINTFUSE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _na_ext
except ImportError:
    _na_ext = None

BACKEND = "cython" if _na_ext is not None else "torch"


def effective_window(window, height, width):
    """Per-axis window; a window wider than the map collapses to the full axis."""
    return min(window, height), min(window, width)


def window_starts(size, k, device=None):
    i = torch.arange(size, device=device)
    return (i - k // 2).clamp(0, size - k)


def _neighbor_index(size, k, device=None):
    return window_starts(size, k, device)[:, None] + torch.arange(k, device=device)[None, :]


def _na_torch(q, k, v, kh, kw):
    _, H, W, _ = q.shape
    ih = _neighbor_index(H, kh, q.device)
    iw = _neighbor_index(W, kw, q.device)
    rows = ih[:, None, :, None]
    cols = iw[None, :, None, :]
    k_nb = k[:, rows, cols]  # (N, H, W, kh, kw, D)
    v_nb = v[:, rows, cols]
    logits = torch.einsum("nhwd,nhwabd->nhwab", q, k_nb)
    attn = torch.softmax(logits.flatten(3), dim=-1)
    out = torch.einsum("nhwt,nhwtd->nhwd", attn, v_nb.flatten(3, 4))
    return out, attn


class _NeighborhoodAttentionFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, k, v, kh, kw):
        q = q.detach().contiguous()
        k = k.detach().contiguous()
        v = v.detach().contiguous()
        N, H, W, D = q.shape
        out = torch.empty_like(q)
        attn = q.new_empty(N, H, W, kh * kw)
        _na_ext.na_forward(q.numpy(), k.numpy(), v.numpy(), kh, kw, out.numpy(), attn.numpy())
        ctx.save_for_backward(q, k, v, attn)
        ctx.window = (kh, kw)
        ctx.mark_non_differentiable(attn)
        return out, attn

    @staticmethod
    def backward(ctx, dout, _dattn):
        q, k, v, attn = ctx.saved_tensors
        kh, kw = ctx.window
        dout = dout.contiguous()
        dq, dk, dv = torch.zeros_like(q), torch.zeros_like(k), torch.zeros_like(v)
        scratch = q.new_empty(kh * kw)
        _na_ext.na_backward(q.numpy(), k.numpy(), v.numpy(), attn.numpy(), dout.numpy(),
                            kh, kw, dq.numpy(), dk.numpy(), dv.numpy(), scratch.numpy())
        return dq, dk, dv, None, None


def _use_compiled(*tensors):
    return _na_ext is not None and all(
        t.device.type == "cpu" and t.dtype in (torch.float32, torch.float64) for t in tensors)


def neighborhood_attention(q, k, v, window, backend=None):
    """Attend each query to its clamped ``window x window`` neighbourhood.

    ``q``, ``k``, ``v`` are (N, H, W, D); queries must already carry the
    1/sqrt(D) scale. Returns ``(out, weights)`` with weights shaped
    (N, H, W, kh*kw) in row-major neighbourhood order.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"neighborhood window must be odd and positive, got {window}")
    _, H, W, _ = q.shape
    kh, kw = effective_window(window, H, W)
    if backend is None:
        backend = "cython" if _use_compiled(q, k, v) else "torch"
    if backend == "cython":
        if _na_ext is None:
            raise RuntimeError("compiled neighborhood kernel is not available")
        return _NeighborhoodAttentionFn.apply(q, k, v, kh, kw)
    return _na_torch(q, k, v, kh, kw)


def dense_attention(q, k, v):
    """Plain global self-attention on (N, H, W, D) maps."""
    N, H, W, D = q.shape
    logits = q.reshape(N, H * W, D) @ k.reshape(N, H * W, D).transpose(1, 2)
    attn = torch.softmax(logits, dim=-1)
    return (attn @ v.reshape(N, H * W, D)).reshape(N, H, W, D), attn
