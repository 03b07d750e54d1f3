"""The text-conditioned segmentation model: text tower + backbone + fusion."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from useg.autograd import ParameterStore, Tensor, constant, load_checkpoint, no_grad, ops, save_checkpoint
from useg.backbone import ModelConfig, decode, encode, init_backbone_params
from useg.errors import MissingText, ShapeMismatch
from useg.fusion import init_fusion_params
from useg.text import TextConfig, TokenSequence, Vocabulary, encode_text, init_text_params, tokenize


class SegmentationModel:
    """Parameters plus the forward pass for one :class:`ModelConfig`.

    The backbone, text tower and fusion layers are initialised from separate
    random streams derived from ``config.seed``, so models that differ only in
    fusion mode share identical backbone weights.
    """

    def __init__(self, config: ModelConfig, vocab: Optional[Vocabulary] = None, dtype=np.float32):
        self.config = config
        self.vocab = vocab
        if config.fusion != "none":
            if vocab is None:
                raise MissingText("a text-fused model needs a vocabulary")
            if len(vocab) != config.vocab_size:
                raise ShapeMismatch(f"vocabulary has {len(vocab)} tokens, config says {config.vocab_size}")
        self.store = ParameterStore(dtype)
        init_backbone_params(self.store, config, np.random.default_rng([config.seed, 0]))
        if self.uses_text:
            init_text_params(self.store, self.text_config, np.random.default_rng([config.seed, 1]))
            init_fusion_params(self.store, config.decoder_widths, config.text_dim, config.fusion)
        self.params = self.store.scope("")

    @property
    def uses_text(self) -> bool:
        return self.config.fusion != "none"

    @property
    def text_config(self) -> TextConfig:
        c = self.config
        return TextConfig(vocab_size=c.vocab_size, dim=c.text_dim, max_len=c.text_len, n_blocks=c.text_blocks)

    @property
    def dtype(self):
        return self.store.dtype

    def _images(self, images) -> Tensor:
        if isinstance(images, Tensor):
            return images
        arr = np.asarray(images, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[:, None]
        return constant(arr)

    def tokens(self, captions: Sequence[Union[str, TokenSequence]]) -> List[TokenSequence]:
        return [c if isinstance(c, TokenSequence) else tokenize(c, self.vocab, self.config.text_len) for c in captions]

    def embed_text(self, captions) -> Tensor:
        return encode_text(self.tokens(captions), self.params.scope("text"), self.text_config)

    def logits(self, images, captions=None, text: Optional[Tensor] = None) -> Tensor:
        """(B, 2, H, W) logits. ``text`` may be passed directly as a pooled embedding."""
        x = self._images(images)
        if self.uses_text and text is None:
            if captions is None:
                raise MissingText(f"fusion mode {self.config.fusion!r} needs captions")
            text = self.embed_text(captions)
        pyramid = encode(x, self.params, self.config)
        return decode(pyramid, x, text if self.uses_text else None, self.params, self.config)

    def segment(self, images, captions=None) -> Tuple[np.ndarray, np.ndarray]:
        """Foreground probability (B,H,W) and binary mask; exact ties go to background."""
        with no_grad():
            lg = self.logits(images, captions)
            prob = ops.softmax(lg, axis=1).data[:, 1]
        mask = (lg.data[:, 1] > lg.data[:, 0]).astype(np.uint8)
        return prob, mask

    def save(self, stem, extra: Optional[dict] = None):
        meta = {"model_config": self.config.to_dict()}
        if self.vocab is not None:
            meta["vocab"] = self.vocab.token_to_id
        meta.update(extra or {})
        return save_checkpoint(self.store, stem, meta)

    @classmethod
    def load(cls, stem, dtype=np.float32) -> Tuple["SegmentationModel", dict]:
        from useg.autograd import read_checkpoint

        _, meta = read_checkpoint(stem)
        cfg = ModelConfig.from_dict(meta["model_config"])
        vocab = Vocabulary(meta["vocab"]) if "vocab" in meta else None
        model = cls(cfg, vocab, dtype)
        load_checkpoint(model.store, stem)
        return model, meta
