"""Bit-exact external formats: weight container, PPM, CSV, trace JSON."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import cost as cost_mod
from .errors import (
    BadMagicError,
    ConfigError,
    ImageFormatError,
    OverlappingTensorsError,
    TensorShapeMismatchError,
    TruncatedContainerError,
    UsageError,
    WeightFormatError,
)
from .model import ModelConfig, PRESETS, WeightSet
from .reorg import ReorgPlan, SelectionStrategy, WarmupSchedule
from .tokens import ClsOrigin, FusedOrigin, MaskTrace, PatchOrigin, grid_cells

MAGIC = b"EVWT"
FORMAT_VERSION = 1
OVERLAY_DARKEN = 0.25


# ---------------------------------------------------------------------------
# Weight container
# ---------------------------------------------------------------------------


def save_weights(w: WeightSet, path) -> None:
    """Write the container: magic, version (u32 LE), header length (u64 LE),
    JSON header {name: {dtype, shape, offset, nbytes}}, raw LE float64 payload."""
    names = sorted(w.tensors)
    header: dict[str, dict] = {}
    offset = 0
    chunks = []
    for name in names:
        tensor = np.ascontiguousarray(w.tensors[name], dtype="<f8")
        nbytes = tensor.nbytes
        header[name] = {"dtype": "f64", "shape": list(tensor.shape),
                        "offset": offset, "nbytes": nbytes}
        chunks.append(tensor.tobytes())
        offset += nbytes
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path, config: ModelConfig) -> WeightSet:
    """Read a container back; round-trip with save_weights is bitwise lossless."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 16:
        raise TruncatedContainerError(f"{path}: shorter than the fixed header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end:
        raise TruncatedContainerError(f"{path}: header truncated")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: corrupt header ({exc})") from exc

    payload = blob[header_end:]
    spans = []
    for name, meta in header.items():
        if meta.get("dtype") != "f64":
            raise WeightFormatError(f"{path}: tensor {name} has dtype {meta.get('dtype')}")
        spans.append((int(meta["offset"]), int(meta["offset"]) + int(meta["nbytes"]), name))
    spans.sort()
    for (start_a, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise OverlappingTensorsError(
                f"{path}: tensors {name_a} and {name_b} overlap in the payload")
    if spans and spans[-1][1] > len(payload):
        raise TruncatedContainerError(f"{path}: payload truncated")

    tensors = {}
    for name, meta in header.items():
        shape = tuple(int(s) for s in meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        if count * 8 != int(meta["nbytes"]):
            raise WeightFormatError(f"{path}: tensor {name} shape/nbytes mismatch")
        start = int(meta["offset"])
        data = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        tensors[name] = data.reshape(shape).astype(np.float64)
    try:
        return WeightSet(config, tensors)
    except Exception as exc:
        raise TensorShapeMismatchError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PPM (binary P6, 8-bit)
# ---------------------------------------------------------------------------


def _read_ppm_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of PPM header")
    return blob[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Binary P6 (maxval 255) to an (h, w, 3) float array in [0, 1]."""
    blob = Path(path).read_bytes()
    token, pos = _read_ppm_token(blob, 0)
    if token != b"P6":
        raise ImageFormatError(f"{path}: not a binary P6 file (magic {token!r})")
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(blob, pos)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    data = blob[pos:pos + expected]
    if len(data) != expected:
        raise ImageFormatError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def write_ppm(raster: np.ndarray, path) -> None:
    """(h, w, 3) floats in [0, 1] to binary P6; channels round half up."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ImageFormatError("write_ppm expects an (h, w, 3) raster")
    quantized = np.clip(np.floor(raster * 255.0 + 0.5), 0, 255).astype(np.uint8)
    height, width = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


# ---------------------------------------------------------------------------
# Mask overlay
# ---------------------------------------------------------------------------


def render_mask_overlay(image: np.ndarray, mask_trace: MaskTrace, layer: int,
                        patch: int) -> np.ndarray:
    """Darken every patch fused or removed at `layer` (constituents traced
    back to grid cells); kept patches pass through untouched."""
    event = mask_trace.event_for_layer(layer)
    if event is None:
        raise UsageError(f"layer {layer} is not a reorganization layer of this run")
    out = np.asarray(image, dtype=np.float64).copy()
    for origin in event.dropped_origins:
        for cell in grid_cells(origin):
            r0, c0 = cell.row * patch, cell.col * patch
            out[r0:r0 + patch, c0:c0 + patch, :] *= OVERLAY_DARKEN
    return out


def emit_mask_overlay(image: np.ndarray, mask_trace: MaskTrace, layer: int,
                      path, *, patch: int) -> None:
    write_ppm(render_mask_overlay(image, mask_trace, layer, patch), path)


# ---------------------------------------------------------------------------
# CSV / JSON emission
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("config", "resolution", "kappa", "locations", "total_gmacs", "reduction_pct")


def emit_csv(reports, path, *, baselines=None) -> None:
    """Cost reports as CSV in the fixed column order.

    `baselines` (parallel list, optional) supplies the keep-rate-1 report each
    row's reduction is computed against; without it the reduction is 0 for
    plan-free rows and computed against the same config otherwise.
    """
    lines = [",".join(CSV_COLUMNS)]
    for i, report in enumerate(reports):
        config = report.config
        name = next((k for k, v in PRESETS.items()
                     if v.with_resolution(config.resolution) == config), None)
        if name is None:
            name = f"vit-d{config.dim}-h{config.heads}-L{config.depth}"
        if baselines is not None:
            baseline = baselines[i]
        else:
            baseline = cost_mod.model_macs(config, None)
        kappa = "" if report.kappa is None else repr(report.kappa)
        locations = ";".join(str(x) for x in report.locations)
        lines.append(",".join([
            name, str(config.resolution), kappa, locations,
            repr(report.gmacs), repr(report.reduction_vs(baseline))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def parse_cost_csv(path) -> list[dict]:
    text = Path(path).read_text(encoding="ascii").strip().splitlines()
    header = text[0].split(",")
    rows = []
    for line in text[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        row["total_gmacs"] = float(row["total_gmacs"])
        row["reduction_pct"] = float(row["reduction_pct"])
        row["kappa"] = float(row["kappa"]) if row["kappa"] else None
        rows.append(row)
    return rows


def _origin_to_json(origin):
    if isinstance(origin, ClsOrigin):
        return {"kind": "cls"}
    if isinstance(origin, PatchOrigin):
        return {"kind": "patch", "row": origin.row, "col": origin.col}
    if isinstance(origin, FusedOrigin):
        return {"kind": "fused", "parts": [_origin_to_json(p) for p in origin.parts]}
    raise UsageError(f"unknown origin {origin!r}")


def mask_trace_to_json(mask_trace: MaskTrace) -> dict:
    """JSON form of a mask trace; schema documented in the README."""
    return {"events": [
        {
            "layer": event.layer,
            "keep_rate": event.keep_rate,
            "fusion": event.fusion,
            "strategy": event.strategy,
            "kept_indices": list(event.kept_indices),
            "dropped_indices": list(event.dropped_indices),
            "kept_origins": [_origin_to_json(o) for o in event.kept_origins],
            "dropped_origins": [_origin_to_json(o) for o in event.dropped_origins],
            "scores": [float(s) for s in event.scores],
        }
        for event in mask_trace.events
    ]}


def attentiveness_series_to_json(trace) -> dict:
    """Per-layer head-averaged CLS attention rows (box-plot substrate)."""
    return {"layers": [
        {"layer": i + 1, "cls_attentiveness": [float(v) for v in row]}
        for i, row in enumerate(trace.averaged_cls_rows())
    ]}


def emit_trace_json(payload, path) -> None:
    if isinstance(payload, MaskTrace):
        doc: dict = mask_trace_to_json(payload)
    elif isinstance(payload, dict):
        doc = payload
    else:
        doc = attentiveness_series_to_json(payload)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def _model_config_from_json(doc: dict) -> ModelConfig:
    spec = doc.get("model", "deit-s")
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ConfigError(f"unknown model preset {spec!r} (have {sorted(PRESETS)})")
        config = PRESETS[spec]
    elif isinstance(spec, dict):
        try:
            config = ModelConfig(
                depth=int(spec["depth"]), dim=int(spec["dim"]), heads=int(spec["heads"]),
                mlp_ratio=float(spec.get("mlp_ratio", 4.0)), patch=int(spec.get("patch", 16)),
                resolution=int(spec.get("resolution", 224)),
                num_classes=int(spec.get("num_classes", 1000)))
        except KeyError as exc:
            raise ConfigError(f"model config missing field {exc}") from exc
    else:
        raise ConfigError("model must be a preset name or a field mapping")
    if "resolution" in doc:
        config = config.with_resolution(int(doc["resolution"]))
    return config


def _plan_from_json(doc: dict, config: ModelConfig) -> ReorgPlan | None:
    locations = doc.get("locations")
    if not locations:
        return None
    locations = tuple(int(x) for x in locations)
    if "keep_rates" in doc:
        rates = tuple(float(r) for r in doc["keep_rates"])
    else:
        rates = (float(doc.get("keep_rate", 1.0)),) * len(locations)
    strategy = SelectionStrategy(doc.get("strategy", "topk"))
    fusion = bool(doc.get("fusion", True))
    schedule = None
    warmup = int(doc.get("warmup_steps", 0))
    if warmup > 0:
        schedule = WarmupSchedule(total_steps=warmup, targets=rates)
    plan = ReorgPlan(locations, rates, strategy=strategy, fusion=fusion, schedule=schedule)
    if plan.locations[-1] > config.depth:
        raise ConfigError(f"location {plan.locations[-1]} beyond depth {config.depth}")
    return plan


class RunConfig:
    """Validated run description: model dims, reorganization plan, seed."""

    def __init__(self, config: ModelConfig, plan: ReorgPlan | None, seed: int) -> None:
        self.config = config
        self.plan = plan
        self.seed = seed

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        config = _model_config_from_json(doc)
        plan = _plan_from_json(doc, config)
        return cls(config, plan, int(doc.get("seed", 0)))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: run config must be a JSON object")
        return cls.from_json(doc)
