"""Tokenizers used by the prefill runner.

Both implementations return, for every token, the index of the character
containing the token's first byte, which drives the token-to-step
assignment (a token belongs to the step whose text contains its first
character).
"""

from __future__ import annotations


class ByteTokenizer:
    """Deterministic byte-level tokenizer for the built-in pinned model.

    Token ids are raw UTF-8 byte values (0..255); id 256 is the
    beginning-of-sequence token.
    """

    vocab_size = 257
    bos_token_id = 256

    def encode_with_offsets(self, text: str) -> tuple[list[int], list[int]]:
        ids: list[int] = []
        starts: list[int] = []
        for char_index, char in enumerate(text):
            for byte in char.encode("utf-8"):
                ids.append(byte)
                starts.append(char_index)
        return ids, starts

    def decode_token(self, token_id: int) -> str:
        if token_id == self.bos_token_id:
            return "<bos>"
        return bytes([token_id]).decode("utf-8", errors="replace")


class HuggingFaceTokenizer:
    """Adapter around a fast HF tokenizer providing the same interface."""

    def __init__(self, tokenizer):
        if not getattr(tokenizer, "is_fast", False):
            raise ValueError("a fast tokenizer is required for character offsets")
        self._tokenizer = tokenizer
        self.vocab_size = tokenizer.vocab_size
        bos = tokenizer.bos_token_id
        if bos is None:
            bos = tokenizer.eos_token_id
        if bos is None:
            raise ValueError("tokenizer defines neither BOS nor EOS token")
        self.bos_token_id = bos

    def encode_with_offsets(self, text: str) -> tuple[list[int], list[int]]:
        encoding = self._tokenizer(
            text, add_special_tokens=False, return_offsets_mapping=True
        )
        ids = list(encoding["input_ids"])
        starts = [start for start, _ in encoding["offset_mapping"]]
        return ids, starts

    def decode_token(self, token_id: int) -> str:
        return self._tokenizer.decode([token_id])
