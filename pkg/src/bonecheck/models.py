"""Micro CNN architectures, classifier heads, and average-predictions ensembles.

Each builder produces a small stand-in for one reference family, keeping
that family's defining motif: concatenative density (micro_dense),
depthwise-separable stacks (micro_mobile), two-branch cells (micro_cell),
separable residual blocks (micro_xception). All end in a global average
pool -> single-unit affine -> sigmoid head, so the output is p(normal)
per image.

Graphs are immutable after construction; training mutates parameter
values only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_MAGIC = b"BONECK01"


class GraphConstructionError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    params: dict = field(default_factory=dict)


@dataclass
class ArchConfig:
    """Knobs for the micro architectures; irrelevant knobs are ignored per arch."""
    input_size: tuple[int, int, int] = (1, 64, 64)
    width_mult: float = 1.0
    blocks: int = 2          # micro_dense
    block_layers: int = 3    # micro_dense
    growth: int = 8          # micro_dense
    stages: int = 4          # micro_mobile
    cells: int = 3           # micro_cell
    res_blocks: int = 2      # micro_xception
    seed: int = 0

    def __post_init__(self):
        if self.width_mult <= 0:
            raise GraphConstructionError("width_mult must be positive")
        for knob in ("blocks", "block_layers", "growth", "stages", "cells", "res_blocks"):
            if getattr(self, knob) < 1:
                raise GraphConstructionError(f"{knob} must be >= 1")


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class ModelGraph:
    """Immutable DAG of layers with a named parameter map.

    kind is "single" (sigmoid head) or "ensemble" (average over member
    sigmoid outputs). The input layer is addressed as "input".
    """

    def __init__(self, name: str, layers: list[LayerSpec], parameters: dict[str, Tensor],
                 input_shape: tuple[int, int, int], shapes: dict[str, tuple[int, ...]],
                 arch: dict | None = None, kind: str = "single",
                 member_graphs: dict[str, "ModelGraph"] | None = None):
        self.name = name
        self.layers = list(layers)
        self.parameters = dict(parameters)
        self.input_shape = tuple(input_shape)
        self.shapes = dict(shapes)  # layer name -> per-sample output shape
        self.arch = arch
        self.kind = kind
        self.member_graphs = dict(member_graphs or {})

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(self.member_graphs)

    def has_head(self) -> bool:
        if self.kind == "ensemble":
            return True
        kinds = [l.kind for l in self.layers[-3:]]
        return kinds == ["global_avg_pool", "affine", "sigmoid"]

    def last_conv_layer(self) -> str:
        """Default Grad-CAM target: last layer with a 4-D activation."""
        for layer in reversed(self.layers):
            if len(self.shapes[layer.name]) == 3:
                return layer.name
        raise GraphConstructionError(f"{self.name}: no 4-D activation in graph")

    def astype(self, dtype) -> "ModelGraph":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                  for k, v in self.parameters.items()}
        members = {k: g.astype(dtype) for k, g in self.member_graphs.items()}
        return ModelGraph(self.name, self.layers, params, self.input_shape,
                          self.shapes, self.arch, self.kind, members)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters.values():
            p.requires_grad = flag

    # -- execution ---------------------------------------------------------

    def forward(self, x: Tensor, capture=None):
        """Run the graph on a batch. With capture (iterable of layer names,
        member layers as "member/layer"), returns (output, {name: Tensor})."""
        capture_set = set(capture) if capture is not None else None
        if self.kind == "ensemble":
            outs = []
            captured: dict[str, Tensor] = {}
            for mname, member in self.member_graphs.items():
                want = None
                if capture_set is not None:
                    want = {n.split("/", 1)[1] for n in capture_set
                            if n.startswith(mname + "/")}
                if want:
                    out, acts = member.forward(x, capture=want)
                    for k, v in acts.items():
                        captured[f"{mname}/{k}"] = v
                else:
                    out = member.forward(x)
                outs.append(out)
            result = ag.mean_tensors(outs)
            if capture_set is not None:
                return result, captured
            return result

        acts: dict[str, Tensor] = {"input": x}
        for layer in self.layers:
            ins = [acts[i] for i in layer.inputs]
            acts[layer.name] = self._run_layer(layer, ins)
        out = acts[self.layers[-1].name]
        if capture_set is not None:
            missing = capture_set - acts.keys()
            if missing:
                raise KeyError(f"unknown layer name(s): {sorted(missing)}")
            return out, {n: acts[n] for n in capture_set}
        return out

    def _run_layer(self, layer: LayerSpec, ins: list[Tensor]) -> Tensor:
        kind, p, name = layer.kind, layer.params, layer.name
        if kind == "conv":
            return ag.conv2d(ins[0], self.parameters[f"{name}.weight"],
                             self.parameters[f"{name}.bias"],
                             p["stride"], p["padding"])
        if kind == "depthwise_separable":
            return ag.depthwise_separable_conv2d(
                ins[0], self.parameters[f"{name}.dw_weight"],
                self.parameters[f"{name}.pw_weight"],
                self.parameters[f"{name}.dw_bias"],
                self.parameters[f"{name}.pw_bias"],
                p["stride"], p["padding"])
        if kind == "relu":
            return ag.relu(ins[0])
        if kind == "concat":
            return ag.concat(ins, axis=1)
        if kind == "add":
            out = ins[0]
            for t in ins[1:]:
                out = ag.add(out, t)
            return out
        if kind == "avg_pool":
            return ag.avg_pool(ins[0], p["kernel"], p["stride"], p["padding"])
        if kind == "max_pool":
            return ag.max_pool(ins[0], p["kernel"], p["stride"], p["padding"])
        if kind == "global_avg_pool":
            return ag.global_average_pool(ins[0])
        if kind == "affine":
            return ag.affine(ins[0], self.parameters[f"{name}.weight"],
                             self.parameters[f"{name}.bias"])
        if kind == "sigmoid":
            return ag.sigmoid(ins[0])
        if kind == "average":
            return ag.mean_tensors(ins)
        raise GraphConstructionError(f"unknown layer kind {kind!r}")


def count_parameters(graph: ModelGraph) -> int:
    if graph.kind == "ensemble":
        return sum(count_parameters(m) for m in graph.member_graphs.values())
    return sum(p.data.size for p in graph.parameters.values())


# ---------------------------------------------------------------------------
# builder plumbing

class _Builder:
    def __init__(self, name: str, input_shape: tuple[int, int, int], seed: int):
        self.name = name
        self.input_shape = input_shape
        self.rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0])
        self.layers: list[LayerSpec] = []
        self.params: dict[str, Tensor] = {}
        self.shapes: dict[str, tuple[int, ...]] = {"input": input_shape}
        self.last = "input"

    def shape_of(self, layer: str) -> tuple[int, ...]:
        return self.shapes[layer]

    def _add(self, spec: LayerSpec, out_shape: tuple[int, ...]) -> str:
        if any(l.name == spec.name for l in self.layers):
            raise GraphConstructionError(f"duplicate layer name {spec.name}")
        if len(out_shape) == 3 and (out_shape[1] < 1 or out_shape[2] < 1):
            raise GraphConstructionError(
                f"layer {spec.name} drives spatial size to {out_shape[1]}x{out_shape[2]}")
        self.layers.append(spec)
        self.shapes[spec.name] = out_shape
        self.last = spec.name
        return spec.name

    def _param(self, key: str, shape: tuple[int, ...], fan_in: int | None) -> None:
        if fan_in is None:
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = _he_uniform(self.rng, shape, fan_in)
        self.params[key] = Tensor(data, requires_grad=True)

    def conv(self, name: str, src: str, out_ch: int, k: int, stride: int = 1,
             padding: int = 0) -> str:
        c, h, w = self.shapes[src]
        ho = (h + 2 * padding - k) // stride + 1
        wo = (w + 2 * padding - k) // stride + 1
        self._param(f"{name}.weight", (out_ch, c, k, k), c * k * k)
        self._param(f"{name}.bias", (out_ch,), None)
        return self._add(LayerSpec(name, "conv", (src,),
                                   {"stride": stride, "padding": padding}),
                         (out_ch, ho, wo))

    def ds_conv(self, name: str, src: str, out_ch: int, k: int, stride: int = 1,
                padding: int = 0) -> str:
        c, h, w = self.shapes[src]
        ho = (h + 2 * padding - k) // stride + 1
        wo = (w + 2 * padding - k) // stride + 1
        self._param(f"{name}.dw_weight", (c, 1, k, k), k * k)
        self._param(f"{name}.dw_bias", (c,), None)
        self._param(f"{name}.pw_weight", (out_ch, c, 1, 1), c)
        self._param(f"{name}.pw_bias", (out_ch,), None)
        return self._add(LayerSpec(name, "depthwise_separable", (src,),
                                   {"stride": stride, "padding": padding}),
                         (out_ch, ho, wo))

    def relu(self, name: str, src: str) -> str:
        return self._add(LayerSpec(name, "relu", (src,)), self.shapes[src])

    def concat(self, name: str, srcs: list[str]) -> str:
        shapes = [self.shapes[s] for s in srcs]
        for s in shapes[1:]:
            if s[1:] != shapes[0][1:]:
                raise GraphConstructionError(
                    f"concat {name}: spatial sizes differ ({shapes[0]} vs {s})")
        out = (sum(s[0] for s in shapes),) + shapes[0][1:]
        return self._add(LayerSpec(name, "concat", tuple(srcs)), out)

    def add_merge(self, name: str, srcs: list[str]) -> str:
        shapes = [self.shapes[s] for s in srcs]
        for s in shapes[1:]:
            if s != shapes[0]:
                raise GraphConstructionError(
                    f"add {name}: branch shapes differ ({shapes[0]} vs {s})")
        return self._add(LayerSpec(name, "add", tuple(srcs)), shapes[0])

    def avg_pool(self, name: str, src: str, k: int, stride: int, padding: int = 0) -> str:
        c, h, w = self.shapes[src]
        ho = (h + 2 * padding - k) // stride + 1
        wo = (w + 2 * padding - k) // stride + 1
        return self._add(LayerSpec(name, "avg_pool", (src,),
                                   {"kernel": k, "stride": stride, "padding": padding}),
                         (c, ho, wo))

    def build(self, arch: dict) -> ModelGraph:
        return ModelGraph(self.name, self.layers, self.params, self.input_shape,
                          self.shapes, arch=arch)


def _w(base: int, mult: float) -> int:
    return max(1, round(base * mult))


# ---------------------------------------------------------------------------
# architectures

def build_micro_dense(config: ArchConfig) -> ModelGraph:
    """Concatenative dense blocks with 1x1-conv + avg-pool transitions."""
    b = _Builder("micro_dense", config.input_size, config.seed)
    stem_ch = _w(8, config.width_mult)
    growth = _w(config.growth, config.width_mult)
    cur = b.conv("stem", "input", stem_ch, 3, stride=2, padding=1)
    cur = b.relu("stem_relu", cur)
    for blk in range(config.blocks):
        for i in range(config.block_layers):
            conv = b.conv(f"block{blk}_conv{i}", cur, growth, 3, padding=1)
            act = b.relu(f"block{blk}_relu{i}", conv)
            cur = b.concat(f"block{blk}_concat{i}", [cur, act])
        if blk < config.blocks - 1:
            ch = b.shape_of(cur)[0]
            cur = b.conv(f"transition{blk}_conv", cur, max(1, ch // 2), 1)
            cur = b.avg_pool(f"transition{blk}_pool", cur, 2, 2)
    graph = b.build(_arch_dict("micro_dense", config))
    return attach_head(graph)


def build_micro_mobile(config: ArchConfig) -> ModelGraph:
    """Stack of depthwise-separable convs with stride-2 every other stage."""
    b = _Builder("micro_mobile", config.input_size, config.seed)
    base = _w(8, config.width_mult)
    cur = b.conv("stem", "input", base, 3, stride=2, padding=1)
    cur = b.relu("stem_relu", cur)
    width = base
    for j in range(1, config.stages + 1):
        stride = 2 if j % 2 == 0 else 1
        if stride == 2:
            width *= 2
        cur = b.ds_conv(f"stage{j}", cur, width, 3, stride=stride, padding=1)
        cur = b.relu(f"stage{j}_relu", cur)
    graph = b.build(_arch_dict("micro_mobile", config))
    return attach_head(graph)


def build_micro_cell(config: ArchConfig) -> ModelGraph:
    """Repeated two-branch cells: separable conv vs avg-pool + 1x1, merged by add."""
    b = _Builder("micro_cell", config.input_size, config.seed)
    width = _w(16, config.width_mult)
    cur = b.conv("stem", "input", width, 3, stride=2, padding=1)
    cur = b.relu("stem_relu", cur)
    for c in range(config.cells):
        a = b.ds_conv(f"cell{c}_branch_a", cur, width, 3, padding=1)
        pool = b.avg_pool(f"cell{c}_pool", cur, 3, 1, padding=1)
        bb = b.conv(f"cell{c}_branch_b", pool, width, 1)
        merged = b.add_merge(f"cell{c}_merge", [a, bb])
        cur = b.relu(f"cell{c}_relu", merged)
    graph = b.build(_arch_dict("micro_cell", config))
    return attach_head(graph)


def build_micro_xception(config: ArchConfig) -> ModelGraph:
    """Residual blocks of two depthwise-separable convs with identity or 1x1 skips."""
    b = _Builder("micro_xception", config.input_size, config.seed)
    width = _w(16, config.width_mult)
    cur = b.conv("stem", "input", width, 3, stride=2, padding=1)
    cur = b.relu("stem_relu", cur)
    for r in range(config.res_blocks):
        out_ch = width if r == 0 else width * 2
        y = b.ds_conv(f"res{r}_sep1", cur, out_ch, 3, padding=1)
        y = b.relu(f"res{r}_relu1", y)
        y = b.ds_conv(f"res{r}_sep2", y, out_ch, 3, padding=1)
        if b.shape_of(cur)[0] != out_ch:
            skip = b.conv(f"res{r}_proj", cur, out_ch, 1)
        else:
            skip = cur
        merged = b.add_merge(f"res{r}_add", [y, skip])
        cur = b.relu(f"res{r}_relu2", merged)
        width = out_ch
    graph = b.build(_arch_dict("micro_xception", config))
    return attach_head(graph)


ARCHITECTURES = {
    "micro_dense": build_micro_dense,
    "micro_mobile": build_micro_mobile,
    "micro_cell": build_micro_cell,
    "micro_xception": build_micro_xception,
}


def _arch_dict(arch: str, config: ArchConfig) -> dict:
    return {"arch": arch,
            "config": {"input_size": list(config.input_size),
                       "width_mult": config.width_mult,
                       "blocks": config.blocks,
                       "block_layers": config.block_layers,
                       "growth": config.growth,
                       "stages": config.stages,
                       "cells": config.cells,
                       "res_blocks": config.res_blocks,
                       "seed": config.seed}}


def config_from_dict(d: dict) -> ArchConfig:
    d = dict(d)
    d["input_size"] = tuple(d["input_size"])
    return ArchConfig(**d)


def attach_head(backbone: ModelGraph) -> ModelGraph:
    """Append global average pool -> single-unit affine -> sigmoid."""
    if backbone.has_head():
        raise GraphConstructionError(f"{backbone.name}: head already attached")
    out_shape = backbone.shapes[backbone.layers[-1].name]
    if len(out_shape) != 3:
        raise GraphConstructionError(
            f"{backbone.name}: backbone output must be 4-D, got per-sample shape {out_shape}")
    channels = out_shape[0]
    seed = 0
    if backbone.arch:
        seed = int(backbone.arch["config"].get("seed", 0))
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 1])

    layers = list(backbone.layers)
    shapes = dict(backbone.shapes)
    params = dict(backbone.parameters)
    last = layers[-1].name

    layers.append(LayerSpec("gap", "global_avg_pool", (last,)))
    shapes["gap"] = (channels,)
    layers.append(LayerSpec("head", "affine", ("gap",)))
    shapes["head"] = (1,)
    params["head.weight"] = Tensor(_he_uniform(rng, (channels, 1), channels),
                                   requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    layers.append(LayerSpec("prob", "sigmoid", ("head",)))
    shapes["prob"] = (1,)
    return ModelGraph(backbone.name, layers, params, backbone.input_shape,
                      shapes, backbone.arch)


def build_ensemble(members: list[ModelGraph], name: str = "ensemble") -> ModelGraph:
    """Average-predictions ensemble; member weights stay frozen."""
    if not members:
        raise GraphConstructionError("ensemble needs at least one member")
    shape0 = members[0].input_shape
    for m in members[1:]:
        if m.input_shape != shape0:
            raise GraphConstructionError(
                f"ensemble members disagree on input shape: {shape0} vs {m.input_shape}")
    member_graphs: dict[str, ModelGraph] = {}
    for i, m in enumerate(members):
        if not m.has_head():
            raise GraphConstructionError(f"member {m.name} has no sigmoid head")
        mname = m.name if m.name not in member_graphs else f"{m.name}_{i}"
        member_graphs[mname] = m
    return ModelGraph(name, [], {}, shape0, {}, kind="ensemble",
                      member_graphs=member_graphs)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: ModelGraph, path) -> None:
    """Header JSON (arch + parameter directory) followed by a float32 LE blob."""
    if model.kind == "ensemble":
        raise CheckpointFormatError("ensembles are compositions; checkpoint members instead")
    if model.arch is None:
        raise CheckpointFormatError("model has no embedded arch config")
    names = sorted(model.parameters)
    entries = []
    offset = 0
    for n in names:
        shape = list(model.parameters[n].shape)
        entries.append({"name": n, "shape": shape, "offset": offset})
        size = int(np.prod(shape)) if shape else 1
        entries[-1]["offset"] = offset
        offset += size * 4
    header = {"format": "bonecheck-checkpoint", "version": 1, "name": model.name,
              "arch": model.arch, "params": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for n in names:
            f.write(model.parameters[n].data.astype("<f4").tobytes())


def load_checkpoint(path, into: ModelGraph | None = None) -> ModelGraph:
    """Rebuild the graph from the embedded arch config (or load into a given
    graph, which must have matching parameter shapes) and restore weights."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a bonecheck checkpoint")
    hlen = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))[0]
    body_start = len(CHECKPOINT_MAGIC) + 4
    try:
        header = json.loads(raw[body_start:body_start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header ({e})") from e
    if header.get("version") != 1:
        raise CheckpointFormatError(f"{path}: unsupported version {header.get('version')}")
    blob = raw[body_start + hlen:]

    if into is None:
        cfg = config_from_dict(header["arch"]["config"])
        model = ARCHITECTURES[header["arch"]["arch"]](cfg)
    else:
        model = into

    total = sum(int(np.prod(e["shape"])) for e in header["params"])
    if len(blob) != total * 4:
        raise CheckpointFormatError(
            f"{path}: blob holds {len(blob)} bytes, header expects {total * 4}")
    loaded: dict[str, np.ndarray] = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=e["offset"])
        loaded[e["name"]] = arr.reshape(shape)
    if set(loaded) != set(model.parameters):
        raise ag.ShapeMismatchError(
            f"{path}: parameter names do not match target graph")
    for n, arr in loaded.items():
        tgt = model.parameters[n]
        if tgt.shape != arr.shape:
            raise ag.ShapeMismatchError(
                f"{path}: parameter {n} has shape {arr.shape}, graph expects {tgt.shape}")
        tgt.data = arr.astype(np.float32).copy()
    return model


# ---------------------------------------------------------------------------
# arch config files: plain "key = value" lines

_INT_KEYS = {"blocks", "block_layers", "growth", "stages", "cells", "res_blocks", "seed"}


def load_arch_config(path) -> tuple[str, ArchConfig]:
    """Parse a key-value architecture file; returns (arch kind, config)."""
    fields: dict = {}
    arch = None
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "arch":
                arch = val
            elif key == "name":
                fields.setdefault("_name", val)
            elif key == "input_size":
                fields["input_size"] = tuple(int(v) for v in val.split(","))
            elif key == "width_mult":
                fields["width_mult"] = float(val)
            elif key in _INT_KEYS:
                fields[key] = int(val)
            else:
                raise ValueError(f"{path}:{ln}: unknown key {key!r}")
    if arch not in ARCHITECTURES:
        raise ValueError(f"{path}: arch must be one of {sorted(ARCHITECTURES)}, got {arch!r}")
    fields.pop("_name", None)
    return arch, ArchConfig(**fields)
