"""Embedding models.

SinglePoseEncoder: hierarchical spatial transformer over one skeleton.
Token trace 18 -> 6 -> 3 -> 1, channel trace 2 -> c1 -> c2 -> c3 -> c_emb.
Joints are permuted into six anatomical groups, attended, merged 3-into-1
(joints -> limbs), attended, merged 2-into-1 (limbs -> body areas), attended,
then concatenated and projected to a unit-norm embedding.

TemporalBaseline: per-frame flatten -> linear -> learned positional
embeddings -> transformer encoder over frames -> mean pool -> projection.
It sees frame order but no explicit joint structure.
"""
from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm2ChState, Parameter, Tensor
from .errors import ConfigError, SequenceLengthError
from .poses import AnatomyMap, DEFAULT_ANATOMY, N_JOINTS

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SinglePoseEncoderConfig:
    c1: int = 32
    c2: int = 64
    c3: int = 128
    c_emb: int = 128
    n_heads: int = 4
    use_residual_ln: bool = True
    input_batchnorm: bool = False
    anatomy: AnatomyMap = field(default_factory=AnatomyMap)

    def __post_init__(self):
        for width in (self.c1, self.c2, self.c3):
            if width % self.n_heads != 0:
                raise ConfigError(f"stage width {width} not divisible by {self.n_heads} heads")


@dataclass(frozen=True)
class TemporalBaselineConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    seq_len: int = 60
    c_emb: int = 128
    use_residual_ln: bool = True
    input_batchnorm: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ParamStore:
    """Ordered name -> Parameter registry with an optional input batch norm."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.input_bn: BatchNorm2ChState | None = None

    def add(self, name, data):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        p = Parameter(np.asarray(data, dtype=np.float64), name)
        self.params[name] = p
        return p

    def __getitem__(self, name):
        return self.params[name]

    def all_parameters(self) -> list:
        out = list(self.params.values())
        if self.input_bn is not None:
            out.extend([self.input_bn.gamma, self.input_bn.beta])
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.all_parameters())

    def msa_params(self, prefix):
        return {k: self.params[f"{prefix}.{n}"]
                for k, n in (("wq", "wq"), ("bq", "bq"), ("wk", "wk"), ("bk", "bk"),
                             ("wv", "wv"), ("bv", "bv"), ("wo", "wo"), ("bo", "bo"))}


def _add_msa(store: ParamStore, rng, prefix, d):
    for n in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{n}", _xavier(rng, d, d))
        store.add(f"{prefix}.b{n[1]}", np.zeros(d))


def _add_ln(store: ParamStore, prefix, d):
    store.add(f"{prefix}.gamma", np.ones(d))
    store.add(f"{prefix}.beta", np.zeros(d))


def init_spe_params(config: SinglePoseEncoderConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("proj_in.weight", _xavier(rng, 2, config.c1))
    store.add("proj_in.bias", np.zeros(config.c1))
    _add_msa(store, rng, "stage1.attn", config.c1)
    if config.use_residual_ln:
        _add_ln(store, "stage1.ln", config.c1)
    store.add("merge1.weight", _xavier(rng, 3 * config.c1, config.c2))
    store.add("merge1.bias", np.zeros(config.c2))
    _add_msa(store, rng, "stage2.attn", config.c2)
    if config.use_residual_ln:
        _add_ln(store, "stage2.ln", config.c2)
    store.add("merge2.weight", _xavier(rng, 2 * config.c2, config.c3))
    store.add("merge2.bias", np.zeros(config.c3))
    _add_msa(store, rng, "stage3.attn", config.c3)
    if config.use_residual_ln:
        _add_ln(store, "stage3.ln", config.c3)
    store.add("proj_emb.weight", _xavier(rng, 3 * config.c3, config.c_emb))
    store.add("proj_emb.bias", np.zeros(config.c_emb))
    if config.input_batchnorm:
        store.input_bn = BatchNorm2ChState.create("input_bn")
    return store


def _encoder_stage(x: Tensor, store: ParamStore, prefix, n_heads, use_residual_ln):
    y = ad.msa(x, store.msa_params(f"{prefix}.attn"), n_heads)
    if use_residual_ln:
        y = ad.layer_norm(x + y, store[f"{prefix}.ln.gamma"], store[f"{prefix}.ln.beta"])
    return y


def spe_forward(poses: np.ndarray, store: ParamStore, config: SinglePoseEncoderConfig,
                training: bool = False, debug: bool = False) -> Tensor:
    """Embed a batch of poses. poses: (B, 18, 2) in BODY-18 order -> (B, c_emb)."""
    poses = np.asarray(poses, dtype=np.float64)
    single = poses.ndim == 2
    if single:
        poses = poses[None]
    if poses.shape[1:] != (N_JOINTS, 2):
        raise ConfigError(f"expected (B, 18, 2) input, got {poses.shape}")
    b = poses.shape[0]
    x = Tensor(poses[:, list(config.anatomy.permutation), :])
    if config.input_batchnorm:
        if store.input_bn is None:
            raise ConfigError("config enables input batch norm but params lack it")
        x = ad.batchnorm_2ch(x, store.input_bn, training)
    trace = [x.shape[1]]
    x = ad.linear(x, store["proj_in.weight"], store["proj_in.bias"])       # (B, 18, c1)
    x = _encoder_stage(x, store, "stage1", config.n_heads, config.use_residual_ln)
    x = x.reshape(b, 6, 3 * config.c1)
    x = ad.linear(x, store["merge1.weight"], store["merge1.bias"])         # (B, 6, c2)
    trace.append(x.shape[1])
    x = _encoder_stage(x, store, "stage2", config.n_heads, config.use_residual_ln)
    x = x.reshape(b, 3, 2 * config.c2)
    x = ad.linear(x, store["merge2.weight"], store["merge2.bias"])         # (B, 3, c3)
    trace.append(x.shape[1])
    x = _encoder_stage(x, store, "stage3", config.n_heads, config.use_residual_ln)
    x = x.reshape(b, 3 * config.c3)
    e = ad.linear(x, store["proj_emb.weight"], store["proj_emb.bias"])     # (B, c_emb)
    trace.append(1)
    if debug:
        assert trace == [18, 6, 3, 1], f"token trace {trace}"
    e = ad.l2_normalize(e, axis=-1)
    return e[0] if single else e


def spe_parameter_count(config: SinglePoseEncoderConfig) -> int:
    return init_spe_params(config, seed=0).n_parameters()


def init_temporal_params(config: TemporalBaselineConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("proj_in.weight", _xavier(rng, 2 * N_JOINTS, config.d_model))
    store.add("proj_in.bias", np.zeros(config.d_model))
    store.add("pos_emb", 0.02 * rng.standard_normal((config.seq_len, config.d_model)))
    for i in range(config.n_layers):
        _add_msa(store, rng, f"layer{i}.attn", config.d_model)
        if config.use_residual_ln:
            _add_ln(store, f"layer{i}.ln", config.d_model)
    store.add("proj_emb.weight", _xavier(rng, config.d_model, config.c_emb))
    store.add("proj_emb.bias", np.zeros(config.c_emb))
    if config.input_batchnorm:
        store.input_bn = BatchNorm2ChState.create("input_bn")
    return store


def temporal_forward(frames: np.ndarray, store: ParamStore, config: TemporalBaselineConfig,
                     training: bool = False) -> Tensor:
    """Embed sequences. frames: (B, N, 18, 2) with N == config.seq_len -> (B, c_emb)."""
    frames = np.asarray(frames, dtype=np.float64)
    single = frames.ndim == 3
    if single:
        frames = frames[None]
    if frames.shape[1] != config.seq_len or frames.shape[2:] != (N_JOINTS, 2):
        raise SequenceLengthError(
            f"expected (B, {config.seq_len}, 18, 2) input, got {frames.shape}")
    b, n = frames.shape[0], frames.shape[1]
    x = Tensor(frames)
    if config.input_batchnorm:
        if store.input_bn is None:
            raise ConfigError("config enables input batch norm but params lack it")
        x = ad.batchnorm_2ch(x, store.input_bn, training)
    x = x.reshape(b, n, 2 * N_JOINTS)
    x = ad.linear(x, store["proj_in.weight"], store["proj_in.bias"])
    x = x + store["pos_emb"]
    for i in range(config.n_layers):
        x = _encoder_stage(x, store, f"layer{i}", config.n_heads, config.use_residual_ln)
    x = x.mean(axis=1)
    e = ad.linear(x, store["proj_emb.weight"], store["proj_emb.bias"])
    e = ad.l2_normalize(e, axis=-1)
    return e[0] if single else e


def embed_sequence_with_spe(frames: np.ndarray, store: ParamStore,
                            config: SinglePoseEncoderConfig,
                            pooling: str = "mean"):
    """Sequence-level embedding for the single-pose model.

    mean: mean of per-frame embeddings, re-normalized (order-free by design).
    per-frame: (N, c_emb) array of per-frame embeddings.
    """
    frames = np.asarray(frames, dtype=np.float64)
    with ad.no_grad():
        per_frame = spe_forward(frames, store, config, training=False)
    if pooling == "per-frame":
        return per_frame.data
    if pooling != "mean":
        raise ValueError(f"unknown pooling {pooling!r}")
    pooled = per_frame.data.mean(axis=0)
    return pooled / np.linalg.norm(pooled)


# -- configs as dicts --

def config_to_dict(config) -> dict:
    d = asdict(config)
    if "anatomy" in d:
        d["anatomy"] = list(config.anatomy.permutation)
    return d


def config_from_dict(kind: str, d: dict):
    d = dict(d)
    if kind == "spe":
        if "anatomy" in d:
            d["anatomy"] = AnatomyMap(tuple(d["anatomy"]))
        return SinglePoseEncoderConfig(**d)
    if kind == "temporal":
        return TemporalBaselineConfig(**d)
    raise ConfigError(f"unknown model kind {kind!r}")


def init_params(kind: str, config, seed: int) -> ParamStore:
    if kind == "spe":
        return init_spe_params(config, seed)
    if kind == "temporal":
        return init_temporal_params(config, seed)
    raise ConfigError(f"unknown model kind {kind!r}")


# -- checkpoint persistence --
# JSON container; parameter payloads are raw little-endian float64 bytes,
# base64-encoded, so round trips are bit-exact.

def _encode_array(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")}

def _decode_array(d: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").astype(np.float64)
    return arr.reshape(d["shape"])


def save_checkpoint(path, kind: str, config, store: ParamStore, seed: int,
                    scheme: str = "none", optimizer_state: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model": kind,
        "config": config_to_dict(config),
        "seed": seed,
        "scheme": scheme,
        "params": {name: _encode_array(p.data) for name, p in store.params.items()},
    }
    if store.input_bn is not None:
        payload["input_bn"] = {
            "gamma": _encode_array(store.input_bn.gamma.data),
            "beta": _encode_array(store.input_bn.beta.data),
            "running_mean": _encode_array(store.input_bn.running_mean),
            "running_var": _encode_array(store.input_bn.running_var),
        }
    if optimizer_state is not None:
        payload["optimizer"] = {
            "t": optimizer_state["t"],
            "m": {k: _encode_array(v) for k, v in optimizer_state["m"].items()},
            "v": {k: _encode_array(v) for k, v in optimizer_state["v"].items()},
        }
    if extra:
        payload["extra"] = extra
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
        f.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')}")
    kind = payload["model"]
    config = config_from_dict(kind, payload["config"])
    store = ParamStore()
    for name, d in payload["params"].items():
        store.add(name, _decode_array(d))
    if "input_bn" in payload:
        bn = payload["input_bn"]
        store.input_bn = BatchNorm2ChState(
            gamma=Parameter(_decode_array(bn["gamma"]), "input_bn.gamma"),
            beta=Parameter(_decode_array(bn["beta"]), "input_bn.beta"),
            running_mean=_decode_array(bn["running_mean"]),
            running_var=_decode_array(bn["running_var"]),
        )
    optimizer_state = None
    if "optimizer" in payload:
        opt = payload["optimizer"]
        optimizer_state = {
            "t": opt["t"],
            "m": {k: _decode_array(v) for k, v in opt["m"].items()},
            "v": {k: _decode_array(v) for k, v in opt["v"].items()},
        }
    return {
        "model": kind,
        "config": config,
        "store": store,
        "seed": payload["seed"],
        "scheme": payload.get("scheme", "none"),
        "optimizer": optimizer_state,
        "extra": payload.get("extra", {}),
    }
