# ptsd/network.py
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from django.core.exceptions import ValidationError
from torch import nn

from frontend.services.feature_service import Frontend, FrontendConfig
from labels.types import FRAME_RATE, EventDescriptor
from ptsd.prompts import PROMPT_TABLE_ROWS, TIMESTAMP_KIND, PromptBatch

PROB_EPS = 1e-7


class QueryInteraction:
    JOINT = "joint"
    INDEPENDENT = "independent"
    values = (JOINT, INDEPENDENT)


class PromptSource:
    TABLE = "table"            # PTSD: filas de F_a (T) o tabla de embeddings (G/N/K)
    ENROLLMENT = "enrollment"  # TS-VAD: embedding de enrolamiento por hablante
    values = (TABLE, ENROLLMENT)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 8
    encoder_layers: int = 4
    decoder_layers: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    query_interaction: str = QueryInteraction.JOINT
    prompt_source: str = PromptSource.TABLE
    max_len: int = 4096

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model={self.d_model} debe ser positivo y divisible entre n_heads={self.n_heads}.",
                code="invalid_config",
            )
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValidationError("Se requiere al menos una capa de encoder y de decoder.", code="invalid_config")
        if self.query_interaction not in QueryInteraction.values:
            raise ValidationError(f"query_interaction inválido: {self.query_interaction}", code="invalid_config")
        if self.prompt_source not in PromptSource.values:
            raise ValidationError(f"prompt_source inválido: {self.prompt_source}", code="invalid_config")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout debe estar en [0, 1).", code="invalid_config")


def sinusoid_table(n_positions: int, d_model: int) -> torch.Tensor:
    position = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(n_positions, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : d_model // 2]
    return table.float()


class SinusoidalPositionalEncoding(nn.Module):
    """
    Codificación posicional fija; solo se suma a la entrada del encoder.
    La tabla cubre max_len frames; secuencias más largas (clip completo con
    --chunk <= 0) la calculan al vuelo con los mismos valores.
    """

    def __init__(self, d_model: int, max_len: int):
        super().__init__()
        self.register_buffer("table", sinusoid_table(max_len, d_model), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n_frames = x.shape[1]
        table = self.table
        if n_frames > table.shape[0]:
            table = sinusoid_table(n_frames, x.shape[-1]).to(device=x.device)
        return x + table[:n_frames].to(dtype=x.dtype)


def build_encoder(cfg: ModelConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=cfg.d_model,
        nhead=cfg.n_heads,
        dim_feedforward=cfg.ff_mult * cfg.d_model,
        dropout=cfg.dropout,
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerEncoder(
        layer, num_layers=cfg.encoder_layers, norm=nn.LayerNorm(cfg.d_model), enable_nested_tensor=False
    )


def build_decoder(cfg: ModelConfig) -> nn.TransformerDecoder:
    layer = nn.TransformerDecoderLayer(
        d_model=cfg.d_model,
        nhead=cfg.n_heads,
        dim_feedforward=cfg.ff_mult * cfg.d_model,
        dropout=cfg.dropout,
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerDecoder(layer, num_layers=cfg.decoder_layers, norm=nn.LayerNorm(cfg.d_model))


@dataclass(frozen=True)
class EnrollmentBatch:
    """
    Prompts TS-VAD: features crudos promediados sobre cada segmento de
    enrolamiento, (B, N, raw_dim), con máscara de filas válidas.
    """
    pooled: torch.Tensor
    valid: torch.Tensor

    @property
    def n_queries(self) -> int:
        return int(self.pooled.shape[1])


@dataclass(frozen=True)
class PosteriorSet:
    """d^p por prompt: una fila (0,1)^T por descriptor, en el orden pedido."""
    descriptors: tuple[EventDescriptor, ...]
    values: np.ndarray
    clip_id: str = ""
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.descriptors):
            raise ValidationError(
                f"PosteriorSet: {len(self.descriptors)} descriptores vs matriz {self.values.shape}.",
                code="shape_mismatch",
            )

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[1])

    def row(self, descriptor: EventDescriptor) -> np.ndarray:
        for idx, desc in enumerate(self.descriptors):
            if desc.key == descriptor.key:
                return self.values[idx]
        raise ValidationError(f"Sin posterior para {descriptor.label}", code="descriptor_mismatch")

    @classmethod
    def concat(cls, parts: list["PosteriorSet"], descriptors: tuple[EventDescriptor, ...] | None = None) -> "PosteriorSet":
        if not parts:
            raise ValidationError("No hay partes que concatenar.", code="empty_prompts")
        return cls(
            descriptors=descriptors or parts[0].descriptors,
            values=np.concatenate([p.values for p in parts], axis=1),
            clip_id=parts[0].clip_id,
            frame_rate=parts[0].frame_rate,
        )


def canonical_query_order(queries: torch.Tensor, query_mask: torch.Tensor) -> torch.Tensor:
    """
    Orden lexicográfico de las filas de consulta (válidas primero). Con las
    consultas siempre en este orden, permutar los prompts permuta la salida
    bit a bit.
    """
    keys = queries.detach().to("cpu", torch.float64).numpy()
    invalid = ~query_mask.detach().cpu().numpy()
    order = np.empty(invalid.shape, dtype=np.int64)
    for b in range(keys.shape[0]):
        # np.lexsort: la última clave es la primaria
        columns = [keys[b, :, d] for d in reversed(range(keys.shape[2]))] + [invalid[b]]
        order[b] = np.lexsort(columns)
    return torch.from_numpy(order).to(queries.device)


def _gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class PTSDModel(nn.Module):
    """
    Prompt-driven target speech diarization:
    F_a = frontend(audio); F_enc = encoder(F_a + PE); F_dec = decoder(prompts, F_enc);
    d^p = sigmoid(F_dec · F_enc^T).
    Con prompt_source=enrollment es el TS-VAD modificado: mismo modelo,
    solo cambia de dónde salen los vectores de prompt.
    """

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

        self.prompt_table = None
        self.enrollment_projection = None
        if cfg.prompt_source == PromptSource.TABLE:
            self.prompt_table = nn.Embedding(len(PROMPT_TABLE_ROWS), cfg.d_model)
        else:
            self.enrollment_projection = nn.Linear(cfg.d_model, cfg.d_model)

        self.positional = SinusoidalPositionalEncoding(cfg.d_model, cfg.max_len)
        self.encoder = build_encoder(cfg)
        self.decoder = build_decoder(cfg)

    # -- etapas -------------------------------------------------------------

    def features(self, raw: torch.Tensor) -> torch.Tensor:
        """F_a (B, T, D) a partir de features crudos (B, T, raw_dim)."""
        return self.frontend.project(raw)

    def resolve_prompts(self, f_a: torch.Tensor, prompts: PromptBatch | EnrollmentBatch) -> torch.Tensor:
        if isinstance(prompts, EnrollmentBatch):
            if self.enrollment_projection is None:
                raise ValidationError("Este modelo no acepta prompts de enrolamiento.", code="invalid_prompts")
            return self.enrollment_projection(self.frontend.project(prompts.pooled.to(f_a.dtype)))

        if self.prompt_table is None:
            raise ValidationError("Este modelo solo acepta prompts de enrolamiento.", code="invalid_prompts")
        kind, frame = prompts.kind.to(f_a.device), prompts.frame.to(f_a.device)
        is_timestamp = (kind == TIMESTAMP_KIND) & prompts.valid.to(f_a.device)
        if bool((frame[is_timestamp] >= f_a.shape[1]).any()):
            raise ValidationError(
                f"Ancla T fuera de rango [0, {f_a.shape[1]}).",
                code="prompt_out_of_range",
            )
        from_features = _gather_rows(f_a, frame.clamp(0, f_a.shape[1] - 1))
        from_table = self.prompt_table(kind.clamp(min=0))
        return torch.where(is_timestamp.unsqueeze(-1), from_features, from_table)

    def encode(self, f_a: torch.Tensor, frame_mask: torch.Tensor | None = None) -> torch.Tensor:
        padding = None if frame_mask is None else ~frame_mask.to(f_a.device)
        return self.encoder(self.positional(f_a), src_key_padding_mask=padding)

    def decode(
        self,
        queries: torch.Tensor,
        f_enc: torch.Tensor,
        frame_mask: torch.Tensor | None = None,
        query_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if queries.shape[1] == 0:
            raise ValidationError("decode requiere al menos un prompt.", code="empty_prompts")
        n_queries = queries.shape[1]
        if query_mask is None:
            query_mask = torch.ones(queries.shape[:2], dtype=torch.bool, device=queries.device)
        query_mask = query_mask.to(queries.device)

        order = canonical_query_order(queries, query_mask)
        inverse = torch.argsort(order, dim=1)
        sorted_queries = _gather_rows(queries, order)
        sorted_mask = torch.gather(query_mask, 1, order)

        memory_padding = None if frame_mask is None else ~frame_mask.to(queries.device)
        if self.cfg.query_interaction == QueryInteraction.INDEPENDENT:
            # Cada consulta solo se atiende a sí misma
            self_mask = ~torch.eye(n_queries, dtype=torch.bool, device=queries.device)
            out = self.decoder(
                sorted_queries, f_enc, tgt_mask=self_mask, memory_key_padding_mask=memory_padding
            )
        else:
            out = self.decoder(
                sorted_queries,
                f_enc,
                tgt_key_padding_mask=~sorted_mask,
                memory_key_padding_mask=memory_padding,
            )
        return _gather_rows(out, inverse)

    @staticmethod
    def score(f_dec: torch.Tensor, f_enc: torch.Tensor) -> torch.Tensor:
        """(B, N, T) = sigmoid(<F_dec_n, F_enc_t>), acotado a [1e-7, 1 - 1e-7]."""
        if f_dec.shape[-1] != f_enc.shape[-1]:
            raise ValidationError(
                f"Ancho de F_dec ({f_dec.shape[-1]}) != ancho de F_enc ({f_enc.shape[-1]}).",
                code="shape_mismatch",
            )
        logits = torch.einsum("bnd,btd->bnt", f_dec, f_enc)
        return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)

    def forward(
        self,
        raw: torch.Tensor,
        prompts: PromptBatch | EnrollmentBatch,
        frame_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        f_a = self.features(raw)
        queries = self.resolve_prompts(f_a, prompts)
        f_enc = self.encode(f_a, frame_mask)
        f_dec = self.decode(queries, f_enc, frame_mask, prompts.valid)
        return self.score(f_dec, f_enc)
