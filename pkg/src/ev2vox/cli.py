"""Command line pipeline: generate, preprocess, train, eval, export.

The five subcommands share a JSON run configuration (strict about unknown
keys) and a dataset manifest. Every command is deterministic given
(config, seed); re-running writes byte-identical artifacts.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointMismatch,
    ConfigError,
    DataError,
    EmptyDataset,
    InvalidSceneSpec,
    IoFailure,
    PipelineError,
)
from .events import BinningConfig, bin_to_frames, read_evt1, write_evt1
from .model import (
    DecoderConfig,
    EncoderConfig,
    build_model,
    frames_to_input,
    model_config_dict,
    model_from_config_dict,
)
from .sim import (
    Box,
    CameraIntrinsics,
    Cylinder,
    Scene,
    Sphere,
    TrajectoryConfig,
    generate_sample,
    scene_from_dict,
    scene_to_dict,
)
from .train import AdamWConfig, TrainRun, evaluate, load_training_checkpoint, train
from .voxel import ProbGrid, VoxelGrid, binarize, read_vox1, unit_cube_mesh, write_vox1

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    category: str
    events: str
    label: str
    split: str


@dataclass
class Manifest:
    """Dataset index: sample ids with event/label file paths and splits.

    File paths are stored relative to the manifest's directory (``root``).
    """

    root: Path
    entries: list[ManifestEntry]

    def for_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def splits_present(self) -> list[str]:
        return [s for s in SPLITS if any(e.split == s for e in self.entries)]


def save_manifest(manifest: Manifest, path: Path) -> None:
    payload = {
        "entries": [
            {
                "id": e.sample_id,
                "category": e.category,
                "events": e.events,
                "label": e.label,
                "split": e.split,
            }
            for e in manifest.entries
        ]
    }
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | os.PathLike) -> Manifest:
    """Load and validate a manifest; fails fast on any missing file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(f"manifest not found: {path} ({exc})") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("entries"), list):
        raise DataError(f"{path}: manifest must be an object with an 'entries' list")
    entries = []
    seen = set()
    for raw in payload["entries"]:
        try:
            entry = ManifestEntry(
                sample_id=str(raw["id"]),
                category=str(raw.get("category", "all")),
                events=str(raw["events"]),
                label=str(raw["label"]),
                split=str(raw["split"]),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest entry {raw!r}") from exc
        if entry.sample_id in seen:
            raise DataError(f"{path}: duplicate sample id {entry.sample_id!r}")
        seen.add(entry.sample_id)
        if entry.split not in SPLITS:
            raise DataError(
                f"{path}: entry {entry.sample_id!r} has unknown split {entry.split!r}"
            )
        for rel in (entry.events, entry.label):
            if not (path.parent / rel).is_file():
                raise IoFailure(f"{path}: missing file {path.parent / rel}")
        entries.append(entry)
    return Manifest(root=path.parent, entries=entries)


# ---------------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class GenerateConfig:
    count: int = 10
    resolution: int = 32
    ratios: tuple[int, int, int] = (8, 1, 1)
    width: int = 64
    height: int = 64
    contrast: float = 0.2
    scenes: tuple[dict, ...] | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"generate.count must be positive, got {self.count}")
        if self.resolution < 1:
            raise ConfigError(f"generate.resolution must be positive, got {self.resolution}")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or sum(self.ratios) == 0:
            raise ConfigError(f"generate.ratios must be three nonnegative weights, got {self.ratios}")
        if self.scenes is not None and self.count != len(self.scenes):
            raise ConfigError(
                f"generate.count {self.count} does not match {len(self.scenes)} explicit scenes"
            )


@dataclass(frozen=True)
class RunConfig:
    """Merged settings for binning, model, trainer, metrics, and generation."""

    binning: BinningConfig
    encoder: EncoderConfig
    decoder: DecoderConfig
    model_seed: int
    optimizer: AdamWConfig
    run: TrainRun
    threshold: float
    distance: float
    generate: GenerateConfig


def _default_config_dict(toy: bool) -> dict:
    if toy:
        binning = {"window": 0.05, "mode": "uniform", "target_height": 32, "target_width": 32}
        encoder, decoder = EncoderConfig.toy(), DecoderConfig.toy()
        optimizer = AdamWConfig.toy()
        run = TrainRun(epochs=100, batch_size=5, seed=0, checkpoint_every=50)
    else:
        binning = {"window": 0.005, "mode": "uniform", "target_height": None, "target_width": None}
        encoder, decoder = EncoderConfig.paper(), DecoderConfig.paper()
        optimizer = AdamWConfig()
        run = TrainRun()
    return {
        "binning": binning,
        "model": {
            "encoder": encoder.to_dict(),
            "decoder": decoder.to_dict(),
            "seed": 0,
        },
        "trainer": {
            "optimizer": dataclasses.asdict(optimizer),
            "run": dataclasses.asdict(run),
        },
        "metrics": {"threshold": 0.3, "distance": 0.20},
        "generate": {
            "count": 10,
            # labels must land at the model's output resolution
            "resolution": 8 if toy else 32,
            "ratios": [8, 1, 1],
            "width": 64,
            "height": 64,
            "contrast": 0.2,
            "scenes": None,
        },
    }


def _merge_strict(base: dict, override: dict, prefix: str = "") -> dict:
    """Recursively merge override into base, rejecting keys base lacks.

    Silent typo absorption is the main reproducibility hazard, so any key
    that does not exist in the defaults is an error, with its full dotted
    path in the message. Lists and scalars replace; dicts merge.
    """
    merged = dict(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _merge_strict(base[key], value, prefix=dotted + ".")
        else:
            merged[key] = value
    return merged


def load_run_config(path: str | None, toy: bool = False, seed: int | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON file, and --seed."""
    merged = _default_config_dict(toy)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config file not found: {path} ({exc})") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
        merged = _merge_strict(merged, data)
    if seed is not None:
        merged["trainer"]["run"]["seed"] = seed
    try:
        gen = merged["generate"]
        scenes = gen["scenes"]
        return RunConfig(
            binning=BinningConfig(**merged["binning"]),
            encoder=EncoderConfig.from_dict(merged["model"]["encoder"]),
            decoder=DecoderConfig.from_dict(merged["model"]["decoder"]),
            model_seed=int(merged["model"]["seed"]),
            optimizer=AdamWConfig(**merged["trainer"]["optimizer"]),
            run=TrainRun(**merged["trainer"]["run"]),
            threshold=float(merged["metrics"]["threshold"]),
            distance=float(merged["metrics"]["distance"]),
            generate=GenerateConfig(
                count=int(gen["count"]),
                resolution=int(gen["resolution"]),
                ratios=tuple(int(r) for r in gen["ratios"]),
                width=int(gen["width"]),
                height=int(gen["height"]),
                contrast=float(gen["contrast"]),
                scenes=None if scenes is None else tuple(scenes),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


# ---------------------------------------------------------------------------
# generation

def split_assignments(ids, ratios, seed: int) -> dict[str, str]:
    """Assign splits by seeded per-sample hashing with exact quotas.

    Samples are ranked by sha256 of "seed:id", so the assignment depends
    only on the id set and seed, never on input order. Quotas follow the
    largest-remainder method, ties resolved in train/val/test order.
    """
    ranked = sorted(ids, key=lambda s: hashlib.sha256(f"{seed}:{s}".encode()).hexdigest())
    total = len(ranked)
    weight = sum(ratios)
    shares = [total * r / weight for r in ratios]
    quotas = [math.floor(s) for s in shares]
    leftovers = sorted(range(3), key=lambda i: (-(shares[i] - quotas[i]), i))
    for i in leftovers[: total - sum(quotas)]:
        quotas[i] += 1
    out = {}
    cursor = 0
    for split, quota in zip(SPLITS, quotas):
        for sid in ranked[cursor:cursor + quota]:
            out[sid] = split
        cursor += quota
    return out


def _procedural_scene(seed: int, index: int) -> tuple[Scene, str]:
    """Sample one desk-scale primitive scene from (seed, index)."""
    rng = np.random.default_rng((seed, index))
    kind = ("sphere", "box", "cylinder")[int(rng.integers(3))]
    center = tuple(rng.uniform(-0.15, 0.15, size=3))
    albedo = float(rng.uniform(0.65, 0.95))
    if kind == "sphere":
        prim = Sphere(center, float(rng.uniform(0.15, 0.32)), albedo)
    elif kind == "box":
        prim = Box(center, tuple(rng.uniform(0.12, 0.3, size=3)), albedo)
    else:
        prim = Cylinder(
            center,
            int(rng.integers(3)),
            float(rng.uniform(0.12, 0.28)),
            float(rng.uniform(0.15, 0.3)),
            albedo,
        )
    return Scene(primitives=[prim]), kind


def _scene_category(scene: Scene) -> str:
    if scene.mesh is not None:
        return "mesh"
    if len(scene.primitives) == 1:
        return type(scene.primitives[0]).__name__.lower()
    return "mixed"


def cmd_generate(cfg: RunConfig, seed: int, out_dir: str) -> Manifest:
    """Write EVT1/VOX1 pairs, per-sample sidecars, and a split manifest."""
    gen = cfg.generate
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise IoFailure(f"output directory {out} is not writable")

    if gen.scenes is not None:
        scenes = [scene_from_dict(s) for s in gen.scenes]
        pairs = [(s, _scene_category(s)) for s in scenes]
    else:
        pairs = [_procedural_scene(seed, i) for i in range(gen.count)]

    traj = TrajectoryConfig()
    cam = CameraIntrinsics(width=gen.width, height=gen.height)
    ids = [f"s{i:04d}" for i in range(gen.count)]
    assignment = split_assignments(ids, gen.ratios, seed)
    entries = []
    for sid, (scene, category) in zip(ids, pairs):
        stream, label = generate_sample(
            scene, traj, cam, contrast=gen.contrast, resolution=gen.resolution
        )
        write_evt1(stream, out / f"{sid}.evt")
        write_vox1(label, out / f"{sid}.vox")
        sidecar = {
            "category": category,
            "scene": scene_to_dict(scene),
            "seed": seed,
            "contrast": gen.contrast,
            "resolution": gen.resolution,
        }
        _write_text(out / f"{sid}.json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        entries.append(
            ManifestEntry(sid, category, f"{sid}.evt", f"{sid}.vox", assignment[sid])
        )
    manifest = Manifest(root=out, entries=entries)
    save_manifest(manifest, out / "manifest.json")
    counts = {s: len(manifest.for_split(s)) for s in SPLITS}
    print(f"wrote {len(entries)} samples to {out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return manifest


# ---------------------------------------------------------------------------
# preprocessing and dataset loading

def _cache_dir(manifest: Manifest, out_dir: str | None) -> Path:
    return Path(out_dir) if out_dir else manifest.root / "cache"


def cmd_preprocess(cfg: RunConfig, manifest_path: str, out_dir: str | None, threads: int) -> int:
    """Bin every event file into a cached frame stack plus a JSON sidecar."""
    manifest = load_manifest(manifest_path)
    cache = _cache_dir(manifest, out_dir)
    try:
        cache.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create cache directory {cache}: {exc}") from exc

    def one(entry: ManifestEntry) -> None:
        stream = read_evt1(manifest.root / entry.events)
        stack = bin_to_frames(stream, cfg.binning)
        np.save(cache / f"{entry.sample_id}.frames.npy", stack.frames)
        meta = {
            "window": stack.window,
            "frame_index_origin": stack.frame_index_origin,
            "shape": list(stack.frames.shape),
            "source": entry.events,
        }
        _write_text(
            cache / f"{entry.sample_id}.frames.json",
            json.dumps(meta, indent=2, sort_keys=True) + "\n",
        )

    # samples are independent, so worker count cannot change the output
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for future in [pool.submit(one, e) for e in manifest.entries]:
            future.result()
    print(f"cached {len(manifest.entries)} frame stacks in {cache}")
    return len(manifest.entries)


def _load_dataset(cfg: RunConfig, manifest: Manifest, splits, cache_dir: Path):
    """Assemble (frames, occupancy, category) samples for the given splits."""
    dataset = []
    for entry in manifest.entries:
        if entry.split not in splits:
            continue
        cached = cache_dir / f"{entry.sample_id}.frames.npy"
        if cached.is_file():
            frames = np.load(cached)
        else:
            frames = bin_to_frames(read_evt1(manifest.root / entry.events), cfg.binning).frames
        label = read_vox1(manifest.root / entry.label)
        dataset.append((frames, label, entry.category))
    return dataset


# ---------------------------------------------------------------------------
# training and evaluation

def _run_dir(manifest: Manifest, out_dir: str | None) -> Path:
    return Path(out_dir) if out_dir else manifest.root / "run"


def cmd_train(cfg: RunConfig, manifest_path: str, out_dir: str | None) -> None:
    manifest = load_manifest(manifest_path)
    dataset = _load_dataset(cfg, manifest, ("train",), _cache_dir(manifest, None))
    if not dataset:
        raise EmptyDataset(f"{manifest_path}: no train-split entries")
    model = build_model(cfg.encoder, cfg.decoder, seed=cfg.model_seed)
    run_dir = _run_dir(manifest, out_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create run directory {run_dir}: {exc}") from exc
    result = train(dataset, model, cfg.run, cfg.optimizer, out_dir=str(run_dir))
    epoch, loss, iou_val = result.log[-1]
    print(f"trained {cfg.run.epochs} epochs on {len(dataset)} samples; "
          f"final loss {loss:.4f}, train IoU {iou_val:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")


def cmd_eval(cfg: RunConfig, manifest_path: str, out_dir: str | None) -> None:
    """Score every split present and write report.txt / report.csv."""
    manifest = load_manifest(manifest_path)
    run_dir = _run_dir(manifest, out_dir)
    ckpt = run_dir / "model.ckpt"
    if not ckpt.is_file():
        raise IoFailure(f"checkpoint not found: {ckpt}")
    expected = model_config_dict(cfg.encoder, cfg.decoder, cfg.model_seed)
    try:
        sidecar = json.loads((run_dir / "model.ckpt.json").read_text())
    except OSError as exc:
        raise IoFailure(f"checkpoint sidecar not found: {ckpt}.json ({exc})") from exc
    if sidecar.get("config") != expected:
        raise CheckpointMismatch(
            f"{ckpt}: checkpoint was trained with a different model configuration"
        )
    model = model_from_config_dict(sidecar["config"])
    load_training_checkpoint(ckpt, model)

    cache = _cache_dir(manifest, None)
    text_parts = []
    csv_lines = ["split,category,count,iou,fscore"]
    for split in manifest.splits_present():
        dataset = _load_dataset(cfg, manifest, (split,), cache)
        report = evaluate(model, dataset, threshold=cfg.threshold, distance=cfg.distance)
        text_parts.append(f"== {split} ==\n{report.text()}")
        for row in report.csv_rows()[1:]:
            csv_lines.append(f"{split},{row}")
    text = "\n\n".join(text_parts) + "\n"
    _write_text(run_dir / "report.txt", text)
    _write_text(run_dir / "report.csv", "\n".join(csv_lines) + "\n")
    print(text, end="")
    print(f"reports written to {run_dir}")


# ---------------------------------------------------------------------------
# export

def grid_to_obj(grid: VoxelGrid) -> str:
    """One axis-aligned cube (8 vertices, 12 triangles) per occupied voxel.

    Cubes are emitted in row-major cell order with no face culling; the
    redundancy keeps the output trivially checkable and viewers cope.
    """
    res = grid.resolution
    cube = unit_cube_mesh()
    lines = [f"# voxel grid export, resolution {res}, occupied {grid.count()}"]
    occupied = np.argwhere(grid.occupancy)
    for n, cell in enumerate(occupied):
        verts = (cell[None, :] + cube.vertices) / res
        for v in verts:
            lines.append(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}")
        base = 8 * n + 1
        for tri in cube.triangles:
            lines.append(f"f {base + tri[0]} {base + tri[1]} {base + tri[2]}")
    return "\n".join(lines) + "\n"


def _export_from_checkpoint(cfg: RunConfig, ckpt_path: str, sample_id: str,
                            manifest_path: str | None) -> VoxelGrid:
    if manifest_path is None:
        raise ConfigError("exporting from a checkpoint needs --manifest for the sample")
    manifest = load_manifest(manifest_path)
    matches = [e for e in manifest.entries if e.sample_id == sample_id]
    if not matches:
        raise DataError(f"{manifest_path}: no sample with id {sample_id!r}")
    entry = matches[0]
    cached = _cache_dir(manifest, None) / f"{entry.sample_id}.frames.npy"
    if cached.is_file():
        frames = np.load(cached)
    else:
        frames = bin_to_frames(read_evt1(manifest.root / entry.events), cfg.binning).frames
    try:
        sidecar = json.loads(Path(str(ckpt_path) + ".json").read_text())
    except OSError as exc:
        raise IoFailure(f"checkpoint sidecar not found: {ckpt_path}.json ({exc})") from exc
    model = model_from_config_dict(sidecar["config"])
    load_training_checkpoint(ckpt_path, model)
    model.eval()
    probs = model.forward(frames_to_input([frames], dtype=model.dtype), remember=False)
    return binarize(ProbGrid(probs.shape[-1], probs[0]), cfg.threshold)


def cmd_export(cfg: RunConfig, input_path: str, sample_id: str | None,
               manifest_path: str | None, out_path: str | None) -> None:
    if out_path is None:
        raise ConfigError("export needs --out for the OBJ destination")
    if input_path.endswith(".vox"):
        if sample_id is not None:
            raise ConfigError("a sample id only applies when exporting from a checkpoint")
        grid = read_vox1(input_path)
    elif input_path.endswith(".ckpt"):
        if sample_id is None:
            raise ConfigError("exporting from a checkpoint needs a sample id argument")
        grid = _export_from_checkpoint(cfg, input_path, sample_id, manifest_path)
    else:
        raise ConfigError(f"export input must be a .vox or .ckpt file, got {input_path!r}")
    _write_text(Path(out_path), grid_to_obj(grid))
    print(f"exported {grid.count()} voxels to {out_path}")


# ---------------------------------------------------------------------------
# plumbing

def _write_text(path: Path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("E2V_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"E2V_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError(f"thread count must be at least 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ev2vox",
        description="Event-camera to voxel-grid pipeline: synthesize datasets, "
        "train the reconstruction model, and inspect results.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--manifest", metavar="PATH", help="dataset manifest")
        p.add_argument("--seed", type=int, metavar="N", help="seed override")
        p.add_argument("--out", metavar="DIR", help=out_help)
        p.add_argument("--threads", type=int, metavar="N",
                       help="worker threads (default 1; E2V_THREADS as fallback)")
        p.add_argument("--toy", action="store_true",
                       help="desk-scale defaults instead of full-scale ones")

    p = sub.add_parser("generate", help="synthesize an event/voxel dataset")
    common(p, "dataset output directory")
    p = sub.add_parser("preprocess", help="bin event files into cached frame stacks")
    common(p, "cache directory (default: <manifest dir>/cache)")
    p = sub.add_parser("train", help="train the reconstruction model")
    common(p, "run directory for checkpoints and logs (default: <manifest dir>/run)")
    p = sub.add_parser("eval", help="score a trained checkpoint per split")
    common(p, "run directory holding model.ckpt (default: <manifest dir>/run)")
    p = sub.add_parser("export", help="write an OBJ cube mesh from a voxel grid")
    p.add_argument("input", help="a .vox file, or a .ckpt checkpoint")
    p.add_argument("sample", nargs="?", default=None,
                   help="sample id to reconstruct (checkpoint input only)")
    common(p, "OBJ output path")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    threads = _resolve_threads(args.threads)
    cfg = load_run_config(args.config, toy=args.toy, seed=args.seed)
    if args.command == "generate":
        if args.out is None:
            raise ConfigError("generate needs --out for the dataset directory")
        cmd_generate(cfg, args.seed if args.seed is not None else 0, args.out)
    elif args.command == "preprocess":
        if args.manifest is None:
            raise ConfigError("preprocess needs --manifest")
        cmd_preprocess(cfg, args.manifest, args.out, threads)
    elif args.command == "train":
        if args.manifest is None:
            raise ConfigError("train needs --manifest")
        cmd_train(cfg, args.manifest, args.out)
    elif args.command == "eval":
        if args.manifest is None:
            raise ConfigError("eval needs --manifest")
        cmd_eval(cfg, args.manifest, args.out)
    elif args.command == "export":
        cmd_export(cfg, args.input, args.sample, args.manifest, args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except PipelineError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    except Exception:
        print(traceback.format_exc(), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
