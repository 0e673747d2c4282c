"""Dynamic skip connections: gated transfer of encoder mid-features into the generator.

A skip unit keeps a recurrent hidden state seeded with the content code,
upsamples it to the current layer, and predicts a reset gate plus a fusion
mask from the concatenated hidden state and encoder feature.  The mask has
the full shape of the generator feature, so it acts as joint channel and
spatial attention.  The conditional variant keeps two parameter branches
blended by a consistency knob ``ell`` in [0, 1] plus a learned per-channel,
per-task attention vector.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

LEAKY_SLOPE = 0.2


def _upsample_to(h: Tensor, size: int) -> Tensor:
    if h.shape[-1] > size or size % h.shape[-1] != 0:
        raise ValueError(f"hidden state at {h.shape[-1]} cannot be upsampled to {size}")
    if h.shape[-1] == size:
        return h
    return F.interpolate(h, size=(size, size), mode="nearest")


def _check_aligned(f_e: Tensor, f_g: Tensor):
    if f_e.shape[-2:] != f_g.shape[-2:]:
        raise ValueError(f"encoder feature {tuple(f_e.shape)} and generator feature "
                         f"{tuple(f_g.shape)} are not spatially aligned")
    if f_e.shape[0] != f_g.shape[0]:
        raise ValueError("batch size mismatch between encoder and generator features")


class DynamicSkip(nn.Module):
    """One gated skip layer: fuses an encoder feature into the generator stream.

    Gates (``r``, ``m``) are sigmoids so the mask stays in (0, 1) under the
    sparsity penalty; feature transforms use leaky activations to keep
    dynamic range.
    """

    def __init__(self, prev_hidden_ch: int, enc_ch: int, gen_ch: int,
                 hidden_ch: int | None = None):
        super().__init__()
        hidden_ch = gen_ch if hidden_ch is None else hidden_ch
        self.hidden_ch = hidden_ch
        self.to_hidden = nn.Conv2d(prev_hidden_ch, hidden_ch, 3, 1, 1)
        self.reset_gate = nn.Conv2d(hidden_ch + enc_ch, hidden_ch, 3, 1, 1)
        self.mask_gate = nn.Conv2d(hidden_ch + enc_ch, gen_ch, 3, 1, 1)
        self.feature = nn.Conv2d(hidden_ch + enc_ch, gen_ch, 3, 1, 1)

    def _hidden(self, h_prev: Tensor, size: int) -> Tensor:
        return F.leaky_relu(self.to_hidden(_upsample_to(h_prev, size)), LEAKY_SLOPE)

    def forward(self, f_e: Tensor, f_g: Tensor, h_prev: Tensor,
                force_zero_mask: bool = False) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (fused feature, mask, new hidden state)."""
        _check_aligned(f_e, f_g)
        h_hat = self._hidden(h_prev, f_e.shape[-1])
        joint = torch.cat([h_hat, f_e], dim=1)
        r = torch.sigmoid(self.reset_gate(joint))
        m = torch.sigmoid(self.mask_gate(joint))
        h_new = r * h_hat
        fe_hat = F.leaky_relu(self.feature(torch.cat([h_new, f_e], dim=1)), LEAKY_SLOPE)
        if force_zero_mask:
            m = torch.zeros_like(m)
        fused = (1.0 - m) * f_g + m * fe_hat
        return fused, m, h_new


class ConditionalDynamicSkip(nn.Module):
    """Two-branch skip layer blended by the content-consistency knob ``ell``.

    Branch 0 and branch 1 hold separate mask/feature kernels for the extreme
    settings; the blend is linear in ``ell`` around each branch's own
    nonlinearity, and a learnable per-channel attention vector (one per task,
    translation vs reconstruction) scales the blended mask.
    """

    TASKS = ("tran", "rec")

    def __init__(self, prev_hidden_ch: int, enc_ch: int, gen_ch: int,
                 hidden_ch: int | None = None):
        super().__init__()
        hidden_ch = gen_ch if hidden_ch is None else hidden_ch
        self.hidden_ch = hidden_ch
        self.to_hidden = nn.Conv2d(prev_hidden_ch, hidden_ch, 3, 1, 1)
        self.reset_gate = nn.Conv2d(hidden_ch + enc_ch, hidden_ch, 3, 1, 1)
        self.mask_gate_0 = nn.Conv2d(hidden_ch + enc_ch, gen_ch, 3, 1, 1)
        self.mask_gate_1 = nn.Conv2d(hidden_ch + enc_ch, gen_ch, 3, 1, 1)
        self.feature_0 = nn.Conv2d(hidden_ch + enc_ch, gen_ch, 3, 1, 1)
        self.feature_1 = nn.Conv2d(hidden_ch + enc_ch, gen_ch, 3, 1, 1)
        # identity attention at init; training specializes per task
        self.attn_tran = nn.Parameter(torch.ones(gen_ch))
        self.attn_rec = nn.Parameter(torch.ones(gen_ch))

    def attention(self, task: str) -> Tensor:
        if task not in self.TASKS:
            raise ValueError(f"task must be one of {self.TASKS}, got {task!r}")
        return self.attn_tran if task == "tran" else self.attn_rec

    def forward(self, f_e: Tensor, f_g: Tensor, h_prev: Tensor, ell: float,
                task: str = "tran") -> tuple[Tensor, Tensor, Tensor]:
        if not 0.0 <= float(ell) <= 1.0:
            raise ValueError(f"ell must lie in [0, 1], got {ell}")
        _check_aligned(f_e, f_g)
        a = self.attention(task).view(1, -1, 1, 1)
        h_hat = F.leaky_relu(self.to_hidden(_upsample_to(h_prev, f_e.shape[-1])), LEAKY_SLOPE)
        joint = torch.cat([h_hat, f_e], dim=1)
        r = torch.sigmoid(self.reset_gate(joint))
        m_blend = ((1.0 - ell) * torch.sigmoid(self.mask_gate_0(joint))
                   + ell * torch.sigmoid(self.mask_gate_1(joint)))
        m = a * m_blend
        h_new = r * h_hat
        joint_h = torch.cat([h_new, f_e], dim=1)
        fe_hat = ((1.0 - ell) * F.leaky_relu(self.feature_0(joint_h), LEAKY_SLOPE)
                  + ell * F.leaky_relu(self.feature_1(joint_h), LEAKY_SLOPE))
        fused = (1.0 - m) * f_g + m * fe_hat
        return fused, m, h_new


def mask_sparsity(masks: list[Tensor]) -> Tensor:
    """Sparsity penalty: mean |m| per layer, summed over layers.

    Mean reduction keeps the penalty invariant to feature resolution.
    """
    if not masks:
        return torch.tensor(0.0)
    total = masks[0].abs().mean()
    for m in masks[1:]:
        total = total + m.abs().mean()
    return total
