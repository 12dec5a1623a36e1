"""Model configuration, parameter allocation and checkpoint files."""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .autodiff import Parameter, init_gaussian, init_orthogonal, init_zero
from .attention import GatingParams, GroundingParams, LocalAttnParams, SoftAttnParams, default_half_width
from .encoder import EncoderParams, GRUParams, InitStateParams
from .vocab import Vocabulary

IMAGE_MODES = ("none", "soft", "hard", "local")

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    emb_dim: int = 620
    enc_dim: int = 1024
    dec_dim: int = 1024
    img_dim: int = 1024
    img_attention: str = "soft"
    gating: bool = False
    doubling: bool = False
    grounding: bool = False
    ground_dim: int = 512
    local_half_width: Optional[int] = None

    def __post_init__(self):
        if self.img_attention not in IMAGE_MODES:
            raise ValueError(f"img_attention must be one of {IMAGE_MODES}, got {self.img_attention!r}")
        for name in ("src_vocab", "tgt_vocab", "emb_dim", "enc_dim", "dec_dim", "img_dim", "ground_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.local_half_width is not None and self.local_half_width < 1:
            raise ValueError("local_half_width must be >= 1")

    @property
    def multimodal(self) -> bool:
        return self.img_attention != "none"

    @property
    def ctx_dim(self) -> int:
        return 2 * self.enc_dim

    @property
    def img_att_dim(self) -> int:
        return 2 * self.img_dim if self.doubling else self.img_dim

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Model:
    """All trainable weights of the encoder and the (doubly-attentive) cGRU decoder.

    Gate weights of every GRU are stored concatenated along the output axis in
    the order [update z | reset r | candidate].
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.config = config
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._kinds: dict[str, str] = {}
        self._allocate(dtype)
        if rng is not None:
            self.initialize(rng)

    # ------------------------------------------------------------ allocation
    def _add(self, name, shape, kind, dtype):
        self.params[name] = Parameter(name, np.zeros(shape, dtype=dtype))
        self._kinds[name] = kind

    def _allocate(self, dtype):
        c = self.config
        E, H, n, C, D = c.emb_dim, c.enc_dim, c.dec_dim, c.ctx_dim, c.img_dim
        add = lambda name, shape, kind="gauss": self._add(name, shape, kind, dtype)  # noqa: E731

        add("enc_emb", (c.src_vocab, E))
        for d in ("fwd", "bwd"):
            add(f"enc_{d}_W", (E, 3 * H))
            add(f"enc_{d}_U", (H, 3 * H), "ortho")
            add(f"enc_{d}_b", (3 * H,), "zero")
        add("init_W1", (C, H))
        add("init_b1", (H,), "zero")
        add("init_W2", (H, n))
        add("init_b2", (n,), "zero")

        add("dec_emb", (c.tgt_vocab, E))
        add("rec1_W", (E, 3 * n))
        add("rec1_U", (n, 3 * n), "ortho")
        add("rec1_b", (3 * n,), "zero")
        add("att_txt_U", (n, C))
        add("att_txt_W", (C, C))
        add("att_txt_v", (C,))
        add("rec2_Wc", (C, 3 * n))
        add("rec2_U", (n, 3 * n), "ortho")
        add("rec2_b", (3 * n,), "zero")
        add("out_Ls", (n, E))
        add("out_Lc", (C, E))
        add("out_Lw", (E, E))
        add("out_b", (E,), "zero")
        add("out_Lo", (E, c.tgt_vocab))
        add("out_bo", (c.tgt_vocab,), "zero")

        if not c.multimodal:
            return
        A = c.img_att_dim
        add("att_img_U", (n, A))
        add("att_img_W", (D, A))
        add("att_img_v", (A,))
        add("rec2_Wi", (D, 3 * n))
        add("out_Li", (D, E))
        if c.img_attention == "local":
            add("loc_U", (n, A))
            add("loc_v", (A,))
        if c.gating:
            add("gate_W", (n,))
            add("gate_b", (1,), "zero")
        if c.grounding:
            if n != D:
                add("gnd_proj", (n, D))
            add("gnd_conv1_W", (D, c.ground_dim))
            add("gnd_conv1_b", (c.ground_dim,), "zero")
            add("gnd_conv2_W", (c.ground_dim,))

    def initialize(self, rng: np.random.Generator) -> "Model":
        """Gaussian N(0, 0.01^2) weights, orthogonal recurrent blocks, zero biases."""
        for name, p in self.params.items():
            kind = self._kinds[name]
            if kind == "zero":
                p.data[...] = init_zero(p.shape, p.dtype)
            elif kind == "ortho":
                rows, cols = p.shape
                blocks = [init_orthogonal((rows, rows), rng, p.dtype) for _ in range(cols // rows)]
                p.data[...] = np.concatenate(blocks, axis=1)
            else:
                p.data[...] = init_gaussian(p.shape, rng, dtype=p.dtype)
        return self

    def randomize(self, rng: np.random.Generator, std: float = 0.5) -> "Model":
        """Fill every parameter (biases included) with N(0, std^2); used for tests."""
        for p in self.params.values():
            p.data[...] = rng.standard_normal(p.shape) * std
        return self

    # --------------------------------------------------------------- helpers
    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def get(self, name) -> Optional[Parameter]:
        return self.params.get(name)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        for p in self.params.values():
            p.astype(dtype)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data[...] = state[k]

    # ---------------------------------------------------------- param views
    def encoder_params(self) -> EncoderParams:
        P = self.params
        return EncoderParams(
            emb=P["enc_emb"],
            fwd=GRUParams(P["enc_fwd_W"], P["enc_fwd_U"], P["enc_fwd_b"]),
            bwd=GRUParams(P["enc_bwd_W"], P["enc_bwd_U"], P["enc_bwd_b"]),
            init=InitStateParams(P["init_W1"], P["init_b1"], P["init_W2"], P["init_b2"]),
        )

    def text_attn(self) -> SoftAttnParams:
        P = self.params
        return SoftAttnParams(P["att_txt_U"], P["att_txt_W"], P["att_txt_v"])

    def img_attn(self) -> Optional[SoftAttnParams]:
        P = self.params
        if "att_img_U" not in P:
            return None
        return SoftAttnParams(P["att_img_U"], P["att_img_W"], P["att_img_v"])

    def local_attn(self, n_annotations: int) -> Optional[LocalAttnParams]:
        P = self.params
        if "loc_U" not in P:
            return None
        half = self.config.local_half_width or default_half_width(n_annotations)
        return LocalAttnParams(P["loc_U"], P["loc_v"], half)

    def gating(self) -> Optional[GatingParams]:
        P = self.params
        return GatingParams(P["gate_W"], P["gate_b"]) if "gate_W" in P else None

    def grounding(self) -> Optional[GroundingParams]:
        P = self.params
        if "gnd_conv1_W" not in P:
            return None
        return GroundingParams(P["gnd_conv1_W"], P["gnd_conv1_b"], P["gnd_conv2_W"], P.get("gnd_proj"))


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, model: Model, src_vocab: Optional[Vocabulary] = None,
                    tgt_vocab: Optional[Vocabulary] = None, extra: Optional[dict] = None) -> None:
    """Write ``MMCK | u32 version | u64 manifest length | manifest JSON | float32 LE payload``.

    The manifest lists parameter names and shapes in payload order, the model
    flags, and the vocabularies with their sha256 digests.
    """
    manifest = {
        "config": asdict(model.config),
        "params": [{"name": k, "shape": list(p.shape)} for k, p in model.params.items()],
        "src_vocab": src_vocab.itos if src_vocab else None,
        "tgt_vocab": tgt_vocab.itos if tgt_vocab else None,
        "src_vocab_sha256": src_vocab.sha256() if src_vocab else None,
        "tgt_vocab_sha256": tgt_vocab.sha256() if tgt_vocab else None,
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (model, src_vocab, tgt_vocab, extra)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 12
    manifest = json.loads(raw[off: off + mlen].decode("utf-8"))
    off += mlen
    model = Model(ModelConfig.from_dict(manifest["config"]))
    for entry in manifest["params"]:
        p = model.params[entry["name"]]
        if list(p.shape) != entry["shape"]:
            raise ValueError(f"{path}: shape mismatch for {entry['name']}")
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        p.data[...] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(p.shape)
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: payload size mismatch")
    vocabs = []
    for key in ("src_vocab", "tgt_vocab"):
        toks = manifest.get(key)
        v = Vocabulary.from_list(toks) if toks else None
        if v is not None and v.sha256() != manifest.get(key + "_sha256"):
            raise ValueError(f"{path}: {key} hash mismatch")
        vocabs.append(v)
    return model, vocabs[0], vocabs[1], manifest.get("extra", {})
