"""Prefill computation: one forward pass, no token generation.

Token NLL comes from the shifted log-softmax of the causal LM logits; the
first prompt token is conditioned on a beginning-of-sequence token.
Attention is taken from the raw softmax outputs (no dropout at eval time),
averaged uniformly over all heads of the last ceil(layer_fraction *
layer_count) layers, then aggregated to step level: entry (i, j), defined
for j < i, is the mean over step i's tokens of the attention mass they
place on step j's tokens. Tokens of system/note/marker segments and the
joining newlines belong to no step.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from prism_sidecar.tokenizer import ByteTokenizer, HuggingFaceTokenizer

TINY_MODEL_ID = "tiny-byte-gpt2-seed1234"
_TINY_SEED = 1234
_TINY_CONTEXT = 4096


class ContextOverflow(Exception):
    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(f"prompt needs {required} tokens, context limit is {available}")


@dataclass
class PrefillOutput:
    step_nll: list[float]
    step_attention: list[list[float]]
    token_counts: list[int]
    prompt_token_total: int
    layer_indices_used: list[int]
    token_detail: list[dict] | None


def selected_layers(layer_count: int, layer_fraction: float) -> list[int]:
    n = max(1, math.ceil(layer_fraction * layer_count - 1e-9))
    n = min(n, layer_count)
    return list(range(layer_count - n, layer_count))


def _build_tiny_model():
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(_TINY_SEED)
    config = GPT2Config(
        vocab_size=ByteTokenizer.vocab_size,
        n_positions=_TINY_CONTEXT,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=ByteTokenizer.bos_token_id,
        eos_token_id=ByteTokenizer.bos_token_id,
        attn_implementation="eager",
    )
    model = GPT2LMHeadModel(config)
    model.eval()
    return model


class PrefillRunner:
    """Owns the model and serializes forward passes.

    With no model path the pinned tiny byte-level model is constructed from
    a fixed seed, which keeps responses stable across restarts. A local
    HuggingFace causal-LM directory (or hub id) wraps a real open-weight
    model instead.
    """

    def __init__(self, model_path: str | None = None):
        self._lock = threading.Lock()
        if model_path:
            from transformers import AutoModelForCausalLM, AutoTokenizer

            self.model = AutoModelForCausalLM.from_pretrained(
                model_path, attn_implementation="eager"
            )
            self.model.eval()
            self.tokenizer = HuggingFaceTokenizer(
                AutoTokenizer.from_pretrained(model_path)
            )
            self.model_id = model_path
        else:
            self.model = _build_tiny_model()
            self.tokenizer = ByteTokenizer()
            self.model_id = TINY_MODEL_ID
        config = self.model.config
        self.layer_count = int(config.num_hidden_layers)
        self.head_count = int(config.num_attention_heads)
        self.context_limit = int(config.max_position_embeddings)

    def model_info(self) -> dict:
        return {
            "model_id": self.model_id,
            "context_limit": self.context_limit,
            "layer_count": self.layer_count,
            "head_count": self.head_count,
            "chat_template": "none",
            "attention_mode": "raw_softmax",
        }

    @staticmethod
    def _prompt_text(segments) -> str:
        return "\n".join(seg["text"] for seg in segments)

    @staticmethod
    def _char_owners(segments, text_length: int) -> list[int | None]:
        """Maps each character of the joined prompt to a step slot."""
        owners: list[int | None] = [None] * text_length
        cursor = 0
        slot = 0
        for position, seg in enumerate(segments):
            if position > 0:
                cursor += 1  # joining newline, owned by no step
            end = cursor + len(seg["text"])
            if seg["kind"] == "step_text":
                for c in range(cursor, end):
                    owners[c] = slot
                slot += 1
            cursor = end
        return owners

    def prefill(
        self, segments, layer_fraction: float, return_token_detail: bool = False
    ) -> PrefillOutput:
        text = self._prompt_text(segments)
        ids, starts = self.tokenizer.encode_with_offsets(text)
        required = len(ids) + 1  # plus BOS
        if required > self.context_limit:
            raise ContextOverflow(required=required, available=self.context_limit)

        owners_by_char = self._char_owners(segments, len(text))
        owners = [owners_by_char[start] for start in starts]
        n_steps = sum(1 for seg in segments if seg["kind"] == "step_text")

        input_ids = torch.tensor([[self.tokenizer.bos_token_id] + ids], dtype=torch.long)
        with self._lock, torch.no_grad():
            outputs = self.model(input_ids, output_attentions=True)

        log_probs = F.log_softmax(outputs.logits[0, :-1].to(torch.float64), dim=-1)
        nll = np.array(
            [-float(log_probs[t, ids[t]]) for t in range(len(ids))], dtype=np.float64
        )

        layers = selected_layers(self.layer_count, layer_fraction)
        stacked = torch.stack([outputs.attentions[layer][0] for layer in layers])
        alpha = stacked.mean(dim=(0, 1)).to(torch.float64).numpy()  # (S, S) incl. BOS

        groups = [
            np.array([t + 1 for t, owner in enumerate(owners) if owner == s], dtype=np.int64)
            for s in range(n_steps)
        ]
        step_nll = np.zeros(n_steps)
        token_counts = np.zeros(n_steps, dtype=np.int64)
        for s, group in enumerate(groups):
            token_counts[s] = len(group)
            if len(group):
                step_nll[s] = nll[group - 1].mean()
        attention = np.zeros((n_steps, n_steps))
        for i in range(n_steps):
            if not len(groups[i]):
                continue
            for j in range(i):
                if not len(groups[j]):
                    continue
                attention[i, j] = alpha[np.ix_(groups[i], groups[j])].sum() / len(groups[i])

        detail = None
        if return_token_detail:
            detail = [
                {
                    "text": self.tokenizer.decode_token(ids[t]),
                    "nll": float(nll[t]),
                    "step": owners[t],
                }
                for t in range(len(ids))
            ]
        return PrefillOutput(
            step_nll=[float(x) for x in step_nll],
            step_attention=[[float(x) for x in row] for row in attention],
            token_counts=[int(x) for x in token_counts],
            prompt_token_total=len(ids),
            layer_indices_used=layers,
            token_detail=detail,
        )

    def raw_attention_rows(self, text: str) -> np.ndarray:
        """Pre-aggregation causal attention (all layers/heads) for debugging;
        every row should sum to 1."""
        ids, _ = self.tokenizer.encode_with_offsets(text)
        input_ids = torch.tensor([[self.tokenizer.bos_token_id] + ids], dtype=torch.long)
        with self._lock, torch.no_grad():
            outputs = self.model(input_ids, output_attentions=True)
        return torch.stack([a[0] for a in outputs.attentions]).numpy()

    def sequence_cross_entropy(self, text: str) -> float:
        """Model-reported mean CE over the shifted sequence, for validation."""
        ids, _ = self.tokenizer.encode_with_offsets(text)
        input_ids = torch.tensor([[self.tokenizer.bos_token_id] + ids], dtype=torch.long)
        with self._lock, torch.no_grad():
            loss = self.model(input_ids, labels=input_ids).loss
        return float(loss)
