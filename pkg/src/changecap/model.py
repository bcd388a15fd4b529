"""Full model wrapper and checkpoint IO."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .decoder import CaptionDecoder, DecoderConfig
from .encoder import ChangeEncoder, EncoderConfig
from .errors import ConfigurationError
from .vocab import Vocabulary

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    dim: int = 128
    num_heads: int = 4
    hsa_layers: int = 2
    backbone_channels: tuple | None = None  # default: (dim // 4, dim // 2, dim)
    unimodal_layers: int = 2
    multimodal_layers: int = 2
    max_len: int = 40
    tie_weights: bool = True
    backbone_finetune: str = "full"

    def encoder_config(self) -> EncoderConfig:
        channels = self.backbone_channels or (max(8, self.dim // 4), max(16, self.dim // 2), self.dim)
        return EncoderConfig(
            image_size=self.image_size,
            dim=self.dim,
            num_heads=self.num_heads,
            hsa_layers=self.hsa_layers,
            backbone_channels=tuple(channels),
        )

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(
            vocab_size=vocab_size,
            dim=self.dim,
            num_heads=self.num_heads,
            unimodal_layers=self.unimodal_layers,
            multimodal_layers=self.multimodal_layers,
            max_len=self.max_len,
            tie_weights=self.tie_weights,
        )


class ChangeCapModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        self.model_config = config
        self.vocab_size = vocab_size
        self.encoder = ChangeEncoder(config.encoder_config())
        self.decoder = CaptionDecoder(config.decoder_config(vocab_size))
        self.encoder.backbone.set_finetune(config.backbone_finetune)

    def forward(self, before, after, token_ids, lengths):
        """Returns (logits, e_con, s_end, e_cap_tokens)."""
        e_cap, e_con = self.encoder(before, after)
        logits, s_end = self.decoder(token_ids, e_cap, lengths)
        return logits, e_con, s_end, e_cap


def save_checkpoint(path, model: ChangeCapModel, vocab: Vocabulary):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.model_config),
            "vocab_tokens": model_vocab_tokens(vocab),
            "min_freq": vocab.min_freq,
            "state_dict": model.state_dict(),
        },
        path,
    )


def model_vocab_tokens(vocab: Vocabulary) -> list[str]:
    from .vocab import SPECIALS

    return vocab.id_to_token[len(SPECIALS) :]


def load_checkpoint(path) -> tuple[ChangeCapModel, Vocabulary]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"checkpoint version {blob.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    cfg = dict(blob["config"])
    if cfg.get("backbone_channels") is not None:
        cfg["backbone_channels"] = tuple(cfg["backbone_channels"])
    config = ModelConfig(**cfg)
    vocab = Vocabulary(blob["vocab_tokens"], min_freq=blob.get("min_freq", 5))
    model = ChangeCapModel(config, vocab_size=len(vocab))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, vocab
