"""Session adapter for transformers vision-language models.

Needs the `hf` extra (torch, transformers, Pillow) and a local or
downloadable checkpoint; nothing here runs in the test suite. The adapter
targets models served through the image-text-to-text interface whose
processors expand an image placeholder into a run of image tokens, which
covers the common open checkpoints. Attention capture forces eager
attention so per-head matrices are materialized.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .session import PreparedInstance


class TransformersVLSession:
    def __init__(self, model_id: str, device: str = "cpu", dtype=None):
        import torch
        from transformers import AutoModelForImageTextToText, AutoProcessor

        self._torch = torch
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.model = AutoModelForImageTextToText.from_pretrained(
            model_id,
            torch_dtype=dtype or torch.float32,
            attn_implementation="eager",
        ).to(device)
        self.model.eval()
        self.device = device
        cfg = self.model.config
        self.image_token_id = int(
            getattr(cfg, "image_token_id", None) or getattr(cfg, "image_token_index")
        )
        self.eos_token_id = int(self.processor.tokenizer.eos_token_id)
        self.num_layers = int(
            getattr(cfg, "num_hidden_layers", None)
            or getattr(cfg.get_text_config(), "num_hidden_layers")
        )

    def encode_label(self, label: str) -> list[int]:
        return self.processor.tokenizer.encode(label, add_special_tokens=False)

    def prepare(self, prompt: str, image_paths: Sequence[str]) -> PreparedInstance:
        from PIL import Image

        images = [Image.open(p).convert("RGB") for p in image_paths]
        content = [{"type": "image"} for _ in images] + [{"type": "text", "text": prompt}]
        chat = [{"role": "user", "content": content}]
        text = self.processor.apply_chat_template(chat, add_generation_prompt=True)
        inputs = self.processor(text=text, images=images, return_tensors="pt").to(self.device)
        token_ids = tuple(int(t) for t in inputs["input_ids"][0])
        return PreparedInstance(token_ids=token_ids, data=inputs)

    def step_logits(self, prepared, prefix: Sequence[int], restrict: Sequence[int]) -> np.ndarray:
        torch = self._torch
        inputs = dict(prepared.data)
        if prefix:
            extra = torch.tensor([list(prefix)], device=self.device)
            inputs["input_ids"] = torch.cat([inputs["input_ids"], extra], dim=1)
            if "attention_mask" in inputs:
                ones = torch.ones_like(extra)
                inputs["attention_mask"] = torch.cat([inputs["attention_mask"], ones], dim=1)
        with torch.no_grad():
            logits = self.model(**inputs).logits[0, -1]
        return logits[list(restrict)].float().cpu().numpy()

    def last_token_attention(self, prepared) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            out = self.model(**prepared.data, output_attentions=True)
        rows = [layer[0, :, -1, :].float().cpu().numpy() for layer in out.attentions]
        return np.stack(rows)
