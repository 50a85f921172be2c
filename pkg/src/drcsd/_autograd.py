"""Differentiable mirror of the forward pass, built on torch.

The numpy forward in model.py is the reference; this module re-expresses
the same arithmetic as a torch graph so reverse-mode differentiation with
respect to X_0 is exact. The heavy structure-bound operations (per-edge
dots, CSR products, row sums) run through the shared numba/scipy kernels
wrapped in custom autograd Functions; Gumbel noise comes from the same
streams as the numpy path and is treated as fixed exogenous input.
Everything runs on CPU in float64 with deterministic (serial) accumulation.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .errors import ValidationError
from .graph import symmetric_normalize
from .model import MASK_PROB_EPS, edge_layout
from .rng import STREAM_MASK, derive_seed, gumbel_pairs

torch.set_grad_enabled(True)


def _t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a))


class _EdgeDotFn(torch.autograd.Function):
    """out[e] = <h[u[e]], h[v[e]]> over canonical edges."""

    @staticmethod
    def forward(ctx, h, u, v):
        hn = np.ascontiguousarray(h.detach().numpy())
        ctx.save_for_backward(h)
        ctx.u, ctx.v = u, v
        return _t(kernels.edge_dot(u, v, hn, hn))

    @staticmethod
    def backward(ctx, grad_out):
        (h,) = ctx.saved_tensors
        hn = np.ascontiguousarray(h.detach().numpy())
        g = np.ascontiguousarray(grad_out.detach().numpy())
        dh = np.zeros_like(hn)
        kernels.edge_dot_backward(ctx.u, ctx.v, g, hn, hn, dh, dh)
        return _t(dh), None, None


class _SpmmFn(torch.autograd.Function):
    """CSR(values on a fixed symmetric pattern) @ dense, via scipy."""

    @staticmethod
    def forward(ctx, values, x, order_ref):
        vn = np.ascontiguousarray(values.detach().numpy())
        xn = np.ascontiguousarray(x.detach().numpy())
        ctx.save_for_backward(values, x)
        ctx.order_ref = order_ref
        return _t(kernels.csr_matmul_dense(order_ref.indptr, order_ref.indices,
                                           vn, order_ref.n, xn))

    @staticmethod
    def backward(ctx, grad_out):
        values, x = ctx.saved_tensors
        o = ctx.order_ref
        g = np.ascontiguousarray(grad_out.detach().numpy())
        grad_values = grad_x = None
        if ctx.needs_input_grad[0]:
            xn = np.ascontiguousarray(x.detach().numpy())
            grad_values = _t(kernels.edge_dot(o.rows, o.cols, g, xn))
        if ctx.needs_input_grad[1]:
            v_t = values.detach().numpy()[o.transpose_perm]
            grad_x = _t(kernels.csr_matmul_dense(o.indptr, o.indices,
                                                 np.ascontiguousarray(v_t),
                                                 o.n, g))
        return grad_values, grad_x, None


class _RowSumFn(torch.autograd.Function):
    """Per-row sums of CSR values (the value-sum degrees)."""

    @staticmethod
    def forward(ctx, values, order_ref):
        ctx.order_ref = order_ref
        return _t(kernels.csr_row_sums(order_ref.indptr,
                                       np.ascontiguousarray(values.detach().numpy())))

    @staticmethod
    def backward(ctx, grad_out):
        g = grad_out.detach().numpy()
        return _t(g[ctx.order_ref.rows]), None


@dataclass
class _OrderRef:
    """Immutable per-order structure shared by forward and backward."""

    n: int
    nnz: int
    indptr: np.ndarray
    indices: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    transpose_perm: np.ndarray
    canon_u: np.ndarray
    canon_v: np.ndarray
    canon_count: int
    rows_t: torch.Tensor
    cols_t: torch.Tensor
    canon_u_t: torch.Tensor
    canon_v_t: torch.Tensor
    canon_inverse_t: torch.Tensor
    base_vals_t: torch.Tensor
    base_norm_t: torch.Tensor


class TorchContext:
    """Per-stack tensors reused across optimization steps."""

    def __init__(self, stack, n_users: int):
        self.order_count = stack.order_count
        self.n_users = n_users
        self.n = stack.matrices[0].n
        self.orders = []
        for mat in stack.matrices:
            lay = edge_layout(mat)
            base_norm = symmetric_normalize(mat).values
            self.orders.append(_OrderRef(
                n=lay.n, nnz=lay.nnz,
                indptr=mat.row_offsets.copy(), indices=mat.col_indices.copy(),
                rows=lay.rows.copy(), cols=lay.cols.copy(),
                transpose_perm=lay.transpose_perm.copy(),
                canon_u=lay.canon_u.copy(), canon_v=lay.canon_v.copy(),
                canon_count=lay.canon_count,
                rows_t=_t(lay.rows.copy()), cols_t=_t(lay.cols.copy()),
                canon_u_t=_t(lay.canon_u.copy()), canon_v_t=_t(lay.canon_v.copy()),
                canon_inverse_t=_t(lay.canon_inverse.copy()),
                base_vals_t=_t(mat.values.copy()),
                base_norm_t=_t(base_norm.copy()),
            ))


def _mean(parts):
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total / len(parts)


def _softplus(z):
    return z.clamp(min=0.0) + torch.log1p(torch.exp(-z.abs()))


def _masked_order(ctx, order_ref, h, tau, noise_delta_t, hard):
    """Similarity -> relaxed mask -> masked normalized values, one order."""
    num = _EdgeDotFn.apply(h, order_ref.canon_u, order_ref.canon_v)
    nsq = (h * h).sum(1)
    den = nsq[order_ref.canon_u_t] * nsq[order_ref.canon_v_t]
    den_pos = den > 0
    den_safe = torch.where(den_pos, den, torch.ones_like(den))
    cos = num * torch.where(den_pos, den_safe.rsqrt(), torch.zeros_like(den))
    s = (cos + 1.0) * 0.5
    p1 = s.clamp(MASK_PROB_EPS, 1.0 - MASK_PROB_EPS)
    p2 = 1.0 - p1
    logit = (torch.log(p1) - torch.log(p2) + noise_delta_t) / tau
    w = torch.sigmoid(logit)
    if hard:
        w = w + ((logit >= 0).double() - w).detach()
    w_dir = w[order_ref.canon_inverse_t]
    vals = w_dir * order_ref.base_vals_t
    deg = _RowSumFn.apply(vals, order_ref)
    deg_pos = deg > 0
    deg_safe = torch.where(deg_pos, deg, torch.ones_like(deg))
    dinv = torch.where(deg_pos, deg_safe.rsqrt(), torch.zeros_like(deg))
    return vals * dinv[order_ref.rows_t] * dinv[order_ref.cols_t]


def step_loss(ctx: TorchContext, x0: torch.Tensor, users, pos_items, neg_items,
              cfg, mask_seed: int, include_ld: bool = True):
    """Total training loss for one batch as a differentiable scalar.

    Returns (total, bpr, ld, reg) tensors. Noise for order l comes from
    the stream derived from (mask_seed, STREAM_MASK, l), matching the
    numpy forward exactly.
    """
    order_count = ctx.order_count
    zero = torch.zeros((), dtype=torch.float64)
    if cfg.mode == "mf":
        x = x0
        ld = zero
    elif cfg.mode == "no_decouple":
        o1 = ctx.orders[0]
        parts = [x0]
        x = x0
        for _ in range(order_count):
            x = _SpmmFn.apply(o1.base_norm_t, x, o1)
            parts.append(x)
        x = _mean(parts)
        ld = zero
    else:
        hidden_source = None
        if cfg.hidden_mode == "all_orders" and order_count >= 2:
            pre = [x0]
            for o in ctx.orders[:order_count - 1]:
                pre.append(_SpmmFn.apply(o.base_norm_t, x0, o))
            hidden_source = _mean(pre)
        parts = [x0]
        ld = zero
        for order in range(1, order_count + 1):
            o = ctx.orders[order - 1]
            h = hidden_source if hidden_source is not None else _mean(parts)
            if cfg.mode == "no_denoise" or o.canon_count == 0:
                nvals = o.base_norm_t
            else:
                noise = gumbel_pairs(derive_seed(mask_seed, STREAM_MASK, order),
                                     o.canon_count)
                noise_delta = _t(np.ascontiguousarray(noise[:, 0] - noise[:, 1]))
                nvals = _masked_order(ctx, o, h, cfg.tau, noise_delta,
                                      cfg.hard_mask)
                if include_ld:
                    ld = ld + (nvals - o.base_norm_t).abs().sum()
            parts.append(_SpmmFn.apply(nvals, x0, o))
        x = _mean(parts)

    users_t = _t(users)
    pos_t = _t(pos_items + ctx.n_users)
    neg_t = _t(neg_items + ctx.n_users)
    xu = x[users_t]
    margin = (xu * x[pos_t]).sum(1) - (xu * x[neg_t]).sum(1)
    bpr = _softplus(-margin).mean()
    reg = (x0 * x0).sum()
    total = bpr + cfg.beta * ld + cfg.l2_coeff * reg
    return total, bpr, ld, reg


def batch_gradient(ctx: TorchContext, x0_np: np.ndarray, users, pos_items,
                   neg_items, cfg, mask_seed: int, include_ld: bool = True):
    """Gradient of the total loss with respect to every entry of X_0."""
    if users.shape[0] == 0:
        raise ValidationError("empty batch")
    x0 = torch.from_numpy(x0_np).clone().requires_grad_(True)
    total, bpr, ld, reg = step_loss(ctx, x0, users, pos_items, neg_items,
                                    cfg, mask_seed, include_ld)
    total.backward()
    grad = x0.grad.detach().numpy()
    return grad, (float(bpr.item()), float(ld.item()), float(reg.item()),
                  float(total.item()))
