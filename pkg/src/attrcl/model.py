"""The retrieval model (shared encoder + attention heads) and checkpoint files."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionHead, HeadConfig, HeadRegistry
from .encoder import EmaTeacher, Encoder, EncoderConfig, to_tensor
from .textemb import TextEncoder

CHECKPOINT_VERSION = 1
SHARED_HEAD = "__shared__"
METHODS = ("mclfir", "er", "multihead_triplet")


class RetrievalModel:
    """Shared encoder plus attribute-selected attention heads.

    Multi-head methods keep one head per attribute. The ``er`` method keeps a
    single shared head conditioned on the attribute text.
    """

    def __init__(self, method: str = "mclfir", encoder_config: EncoderConfig = EncoderConfig(),
                 head_config: HeadConfig | None = None, text: TextEncoder | None = None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        self.method = method
        self.encoder = Encoder(encoder_config)
        self.head_config = head_config or HeadConfig(c_img=encoder_config.out_channels)
        if self.head_config.c_img != encoder_config.out_channels:
            raise ValueError("head input channels must match encoder output channels")
        self.text = text or TextEncoder(self.head_config.text_dim)
        self.registry = HeadRegistry()
        self._text_cache: dict[str, np.ndarray] = {}
        self.teacher: EmaTeacher | None = None

    @property
    def dtype(self):
        return next(self.encoder.parameters()).dtype

    @property
    def shared(self) -> bool:
        return self.method == "er"

    @property
    def attributes(self) -> list[str]:
        return [a for a in self._text_cache]

    def text_vector(self, attribute: str) -> torch.Tensor:
        if attribute not in self._text_cache:
            self._text_cache[attribute] = self.text.embed_attribute(attribute).vector
        return torch.from_numpy(self._text_cache[attribute]).to(self.dtype)

    def head_for(self, attribute: str) -> AttentionHead:
        return self.registry[SHARED_HEAD if self.shared else attribute]

    def has_head(self, attribute: str) -> bool:
        if self.shared:
            return SHARED_HEAD in self.registry and attribute in self._text_cache
        return attribute in self.registry

    def embed_features(self, fmap: torch.Tensor, attribute: str, return_attention=False):
        return self.head_for(attribute)(fmap, self.text_vector(attribute),
                                        return_attention=return_attention)

    @torch.no_grad()
    def embed(self, images, attribute: str, batch_size: int = 256,
              use_teacher: bool = False, return_attention: bool = False):
        """Eval-mode embeddings (and optionally attention maps) as numpy arrays."""
        if not self.has_head(attribute):
            raise KeyError(f"no attention head for attribute {attribute!r}")
        net = self.teacher.model if use_teacher else self.encoder
        head = self.head_for(attribute)
        modes = (net.training, head.training)
        net.eval()
        head.eval()
        images = np.asarray(images)
        embs, maps = [], []
        try:
            for start in range(0, len(images), batch_size):
                x = to_tensor(images[start:start + batch_size], self.dtype)
                out, amap = self.embed_features(net(x), attribute, return_attention=True)
                embs.append(out.numpy())
                maps.append(amap.numpy())
        finally:
            net.train(modes[0])
            head.train(modes[1])
        e = np.concatenate(embs) if embs else np.zeros((0, self.head_config.dim))
        if return_attention:
            return e, np.concatenate(maps)
        return e

    def snapshot(self) -> "RetrievalModel":
        """Independent deep copy, frozen for evaluation."""
        snap = copy.deepcopy(self)
        snap.encoder.eval()
        for h in snap.registry.heads.values():
            h.eval()
        return snap

    # -- checkpoint I/O -----------------------------------------------------

    def to_arrays(self, task_cursor: int = 0) -> dict[str, np.ndarray]:
        meta = {
            "version": CHECKPOINT_VERSION,
            "method": self.method,
            "encoder": {"image_size": self.encoder.config.image_size,
                        "widths": list(self.encoder.config.widths)},
            "head": asdict(self.head_config),
            "heads": list(self.registry.heads),
            "frozen": sorted(self.registry.frozen),
            "attributes": list(self._text_cache),
            "task_cursor": task_cursor,
            "teacher": None if self.teacher is None else
            {"beta": self.teacher.beta, "step": self.teacher.step},
        }
        arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
        for k, v in self.encoder.state_dict().items():
            arrays[f"student/{k}"] = v.detach().cpu().numpy()
        if self.teacher is not None:
            for k, v in self.teacher.state_dict().items():
                arrays[f"teacher/{k}"] = v.detach().cpu().numpy()
        for i, (name, head) in enumerate(self.registry.heads.items()):
            for k, v in head.state_dict().items():
                arrays[f"head{i}/{k}"] = v.detach().cpu().numpy()
        for i, (name, vec) in enumerate(self._text_cache.items()):
            arrays[f"text{i}"] = vec
        return arrays

    @classmethod
    def from_arrays(cls, arrays) -> tuple["RetrievalModel", dict]:
        meta = json.loads(bytes(arrays["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        enc_cfg = EncoderConfig(meta["encoder"]["image_size"], tuple(meta["encoder"]["widths"]))
        head_cfg = HeadConfig(**meta["head"])
        model = cls(meta["method"], enc_cfg, head_cfg)

        def load(module, prefix):
            sd = {k[len(prefix):]: torch.from_numpy(np.array(arrays[k]))
                  for k in arrays if k.startswith(prefix)}
            module.load_state_dict(sd)

        load(model.encoder, "student/")
        if meta["teacher"] is not None:
            model.teacher = EmaTeacher(model.encoder, meta["teacher"]["beta"])
            model.teacher.step = meta["teacher"]["step"]
            load(model.teacher.model, "teacher/")
        for i, name in enumerate(meta["heads"]):
            head = model.registry.add_head(name, head_cfg)
            load(head, f"head{i}/")
        for name in meta["frozen"]:
            model.registry.freeze(name)
        for i, name in enumerate(meta["attributes"]):
            model._text_cache[name] = np.array(arrays[f"text{i}"])
        return model, meta


def save_checkpoint(path, model: RetrievalModel, task_cursor: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **model.to_arrays(task_cursor))
    return path


def load_checkpoint(path) -> tuple[RetrievalModel, dict]:
    with np.load(Path(path)) as data:
        arrays = {k: data[k] for k in data.files}
    return RetrievalModel.from_arrays(arrays)
