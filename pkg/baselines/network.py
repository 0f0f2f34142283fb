# baselines/network.py
from __future__ import annotations

import torch
from django.core.exceptions import ValidationError
from torch import nn

from frontend.services.feature_service import Frontend, FrontendConfig
from ptsd.network import PROB_EPS, ModelConfig, SinusoidalPositionalEncoding, build_encoder

N_GENDER_OUTPUTS = 2  # (female, male)
CONV_DILATIONS = (1, 2, 4)


class DilatedConvBlock(nn.Module):
    def __init__(self, width: int, dilation: int, dropout: float):
        super().__init__()
        self.conv = nn.Conv1d(width, width, kernel_size=3, dilation=dilation, padding=dilation)
        self.norm = nn.LayerNorm(width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, D); conv sobre el eje temporal
        h = self.conv(self.norm(x).transpose(1, 2)).transpose(1, 2)
        return x + self.dropout(torch.relu(h))


class _GenderBaseline(nn.Module):
    """Clasificador por frame sin prompts: 2 salidas sigmoide (female, male)."""

    def __init__(self, frontend_cfg: FrontendConfig, cfg: ModelConfig):
        super().__init__()
        if frontend_cfg.d_model != cfg.d_model:
            raise ValidationError(
                f"frontend.d_model={frontend_cfg.d_model} != model.d_model={cfg.d_model}",
                code="invalid_config",
            )
        self.frontend_cfg = frontend_cfg
        self.cfg = cfg
        self.frontend = Frontend(frontend_cfg)
        self.head = nn.Linear(cfg.d_model, N_GENDER_OUTPUTS)

    def body(self, f_a: torch.Tensor, frame_mask: torch.Tensor | None) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, raw: torch.Tensor, frame_mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, raw_dim) -> (B, 2, T)."""
        hidden = self.body(self.frontend.project(raw), frame_mask)
        return torch.sigmoid(self.head(hidden)).transpose(1, 2).clamp(PROB_EPS, 1.0 - PROB_EPS)


class GenderBaseline1(_GenderBaseline):
    """frontend -> pila convolucional dilatada (3 bloques, ancho D) -> lineal."""

    def __init__(self, frontend_cfg: FrontendConfig, cfg: ModelConfig):
        super().__init__(frontend_cfg, cfg)
        self.blocks = nn.Sequential(*(DilatedConvBlock(cfg.d_model, d, cfg.dropout) for d in CONV_DILATIONS))

    def body(self, f_a, frame_mask):
        if frame_mask is not None:
            f_a = f_a * frame_mask.to(f_a.device, f_a.dtype).unsqueeze(-1)
        return self.blocks(f_a)


class GenderBaseline2(_GenderBaseline):
    """frontend -> encoder transformer compartido (misma config que PTSD) -> lineal."""

    def __init__(self, frontend_cfg: FrontendConfig, cfg: ModelConfig):
        super().__init__(frontend_cfg, cfg)
        self.positional = SinusoidalPositionalEncoding(cfg.d_model, cfg.max_len)
        self.encoder = build_encoder(cfg)

    def body(self, f_a, frame_mask):
        padding = None if frame_mask is None else ~frame_mask.to(f_a.device)
        return self.encoder(self.positional(f_a), src_key_padding_mask=padding)
