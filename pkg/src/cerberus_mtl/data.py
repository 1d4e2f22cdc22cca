"""Synthetic aligned multi-task scenes, dataset manifests, and the tensor container format.

Scenes are small colour images containing "gland" ellipses with optional
"lumen" holes plus small "nucleus" blobs, rendered deterministically from a
seed with a counter-based generator so the same spec always produces the
same bytes on every platform.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

MANIFEST_VERSION = 1

# ---------------------------------------------------------------------------
# Tensor container format
# ---------------------------------------------------------------------------

CONTAINER_MAGIC = b"CBRS"
CONTAINER_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_CODE_FOR_KIND = {"f": 0, "i": 1, "u": 2}


class ContainerError(Exception):
    """Base for container format failures; `code` is a stable short name."""

    code = "container_error"


class ContainerMagicError(ContainerError):
    code = "bad_magic"


class ContainerVersionError(ContainerError):
    code = "bad_version"


class ContainerDTypeError(ContainerError):
    code = "bad_dtype"


class ContainerTruncatedError(ContainerError):
    code = "truncated"


class ContainerCRCError(ContainerError):
    code = "crc_mismatch"


def write_container(path, array: np.ndarray) -> None:
    """Write `array` to `path` in the CBRS container format.

    Accepts float32, int32 and uint8 arrays of any rank. Float payloads must
    be finite. The payload is little-endian row-major with a trailing CRC32.
    """
    array = np.ascontiguousarray(array)
    kind = array.dtype.kind
    if kind not in _CODE_FOR_KIND:
        raise ContainerDTypeError(f"unsupported dtype {array.dtype}")
    code = _CODE_FOR_KIND[kind]
    array = array.astype(_DTYPE_CODES[code], copy=False)
    if kind == "f" and array.size and not np.isfinite(array).all():
        raise ValueError("refusing to write non-finite values")
    payload = array.tobytes()
    header = CONTAINER_MAGIC + struct.pack("<BB", CONTAINER_VERSION, code)
    header += struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(header + payload + crc)


def read_container(path) -> np.ndarray:
    """Read a CBRS container; raises a distinct ContainerError per corruption kind."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CONTAINER_MAGIC:
        raise ContainerMagicError(f"{path}: bad magic")
    if len(blob) < 10:
        raise ContainerTruncatedError(f"{path}: truncated header")
    version, code = struct.unpack_from("<BB", blob, 4)
    if version != CONTAINER_VERSION:
        raise ContainerVersionError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise ContainerDTypeError(f"{path}: unknown dtype code {code}")
    (rank,) = struct.unpack_from("<I", blob, 6)
    offset = 10 + 4 * rank
    if len(blob) < offset:
        raise ContainerTruncatedError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}I", blob, 10)
    dtype = _DTYPE_CODES[code]
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    if rank == 0:
        n_bytes = dtype.itemsize
    if len(blob) < offset + n_bytes + 4:
        raise ContainerTruncatedError(f"{path}: truncated payload")
    payload = blob[offset : offset + n_bytes]
    (crc_stored,) = struct.unpack_from("<I", blob, offset + n_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ContainerCRCError(f"{path}: CRC mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# RNG derivation
# ---------------------------------------------------------------------------


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Labelled sub-stream: one master seed fans out to named deterministic streams."""
    tag = zlib.crc32(label.encode("utf-8")) & 0xFFFFFFFF
    return np.random.Generator(np.random.Philox(key=(int(seed) << 32) ^ tag))


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


@dataclass
class SceneSpec:
    """Geometry and styling knobs for one synthetic scene."""

    canvas_hw: tuple = (64, 64)
    gland_count: tuple = (1, 3)          # inclusive range
    gland_axes: tuple = (5, 11)          # semi-axis range in px
    lumen_scale: tuple = (0.35, 0.55)    # lumen semi-axes as fraction of gland's
    lumen_prob: float = 0.9
    nucleus_count: tuple = (5, 10)
    nucleus_radius: tuple = (3, 5)
    nucleus_classes: int = 3
    min_gap: int = 2
    tissue_thresholds: tuple = (0.12, 0.30)  # gland-area fractions splitting tissue classes
    noise_amplitude: float = 0.04
    style_strength: float = 0.08
    seed: int = 0
    patient: str = "p000"
    max_attempts: int = 300


@dataclass
class Scene:
    image: np.ndarray            # (3,H,W) uint8
    gland_map: np.ndarray        # (H,W) int32 instance ids, 0 background
    lumen_map: np.ndarray
    nucleus_map: np.ndarray
    nucleus_classes: list        # class label (1..K) per nucleus instance
    tissue_label: int


class SceneGenerationError(Exception):
    pass


_PALETTE = {
    "background": (0.82, 0.78, 0.84),
    "gland": (0.70, 0.58, 0.72),
    "lumen": (0.93, 0.91, 0.94),
    "nucleus": [(0.26, 0.20, 0.52), (0.55, 0.20, 0.30), (0.18, 0.42, 0.30),
                (0.50, 0.45, 0.15), (0.15, 0.30, 0.55)],
}


def _ellipse_mask(hw, cy, cx, ry, rx):
    h, w = hw
    yy, xx = np.ogrid[:h, :w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _gap_zone(mask: np.ndarray, gap: int) -> np.ndarray:
    """Pixels within Euclidean distance `gap` of `mask` (mask included)."""
    if not mask.any():
        return mask
    return ndimage.distance_transform_edt(~mask) <= gap


def _place_ellipses(rng, hw, count, axes_range, occupied, gap, max_attempts):
    """Rejection-sample non-overlapping ellipses; returns list of masks."""
    h, w = hw
    lo, hi = axes_range
    masks = []
    blocked = _gap_zone(occupied, gap) if occupied.any() else occupied.copy()
    for _ in range(count):
        placed = False
        for _ in range(max_attempts):
            ry = int(rng.integers(lo, hi + 1))
            rx = int(rng.integers(lo, hi + 1))
            cy = int(rng.integers(ry + 1, h - ry - 1)) if h - 2 * ry - 2 > 0 else None
            cx = int(rng.integers(rx + 1, w - rx - 1)) if w - 2 * rx - 2 > 0 else None
            if cy is None or cx is None:
                continue
            mask = _ellipse_mask(hw, cy, cx, ry, rx)
            if not (mask & blocked).any():
                masks.append((mask, cy, cx, ry, rx))
                blocked |= _gap_zone(mask, gap)
                placed = True
                break
        if not placed:
            raise SceneGenerationError(
                f"could not place instance {len(masks) + 1}/{count} with gap {gap}"
            )
    return masks


def _patient_style(patient: str, strength: float) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=zlib.crc32(patient.encode()) & 0xFFFFFFFF))
    return rng.uniform(-strength, strength, size=3)


def generate_scene(spec: SceneSpec) -> Scene:
    """Render one scene deterministically from (spec.seed, spec.patient)."""
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    h, w = spec.canvas_hw
    empty = np.zeros((h, w), dtype=bool)

    n_glands = int(rng.integers(spec.gland_count[0], spec.gland_count[1] + 1))
    glands = _place_ellipses(rng, spec.canvas_hw, n_glands, spec.gland_axes,
                             empty, spec.min_gap, spec.max_attempts) if n_glands else []

    gland_map = np.zeros((h, w), dtype=np.int32)
    lumen_map = np.zeros((h, w), dtype=np.int32)
    lumens = []
    for idx, (mask, cy, cx, ry, rx) in enumerate(glands, start=1):
        gland_map[mask] = idx
        if rng.random() >= spec.lumen_prob:
            continue
        scale = rng.uniform(*spec.lumen_scale)
        lry = max(2, int(ry * scale))
        lrx = max(2, int(rx * scale))
        # keep the lumen at least min_gap inside the gland boundary
        slack_y = ry - lry - spec.min_gap - 1
        slack_x = rx - lrx - spec.min_gap - 1
        if slack_y < 0 or slack_x < 0:
            continue
        offy = int(rng.integers(-slack_y, slack_y + 1)) if slack_y else 0
        offx = int(rng.integers(-slack_x, slack_x + 1)) if slack_x else 0
        lmask = _ellipse_mask(spec.canvas_hw, cy + offy, cx + offx, lry, lrx)
        lumens.append(lmask)
        lumen_map[lmask] = len(lumens)

    n_nuclei = int(rng.integers(spec.nucleus_count[0], spec.nucleus_count[1] + 1))
    nuclei = _place_ellipses(rng, spec.canvas_hw, n_nuclei, spec.nucleus_radius,
                             empty, spec.min_gap, spec.max_attempts) if n_nuclei else []
    nucleus_map = np.zeros((h, w), dtype=np.int32)
    nucleus_classes = []
    for idx, (mask, *_rest) in enumerate(nuclei, start=1):
        nucleus_map[mask] = idx
        nucleus_classes.append(int(rng.integers(1, spec.nucleus_classes + 1)))

    # render: background -> gland bodies -> lumina -> nuclei, then style + noise
    img = np.empty((3, h, w), dtype=np.float64)
    style = _patient_style(spec.patient, spec.style_strength)
    for c in range(3):
        img[c] = _PALETTE["background"][c]
        img[c][gland_map > 0] = _PALETTE["gland"][c]
        img[c][lumen_map > 0] = _PALETTE["lumen"][c]
    palette = _PALETTE["nucleus"]
    for idx, cls in enumerate(nucleus_classes, start=1):
        colour = palette[(cls - 1) % len(palette)]
        sel = nucleus_map == idx
        for c in range(3):
            img[c][sel] = colour[c]
    noise = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=(3, h, w))
    img = img + style[:, None, None] + noise
    img_u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    gland_fraction = float((gland_map > 0).mean())
    t0, t1 = spec.tissue_thresholds
    tissue = 0 if gland_fraction < t0 else (1 if gland_fraction < t1 else 2)

    return Scene(img_u8, gland_map, lumen_map, nucleus_map, nucleus_classes, tissue)


def validate_scene(scene: Scene, min_gap: int = 2) -> list:
    """Geometric invariants: lumina inside glands, per-map inter-instance gaps."""
    problems = []
    if ((scene.lumen_map > 0) & (scene.gland_map == 0)).any():
        problems.append("lumen pixel outside every gland")
    for name, imap in (("gland", scene.gland_map), ("lumen", scene.lumen_map),
                       ("nucleus", scene.nucleus_map)):
        n = int(imap.max())
        ids = np.unique(imap[imap > 0])
        if len(ids) != n or (n and ids[-1] != n):
            problems.append(f"{name}: instance ids not contiguous 1..{n}")
        for i in range(1, n + 1):
            others = (imap > 0) & (imap != i)
            if not others.any():
                continue
            d = ndimage.distance_transform_edt(imap != i)
            if d[others].min() <= min_gap:
                problems.append(f"{name}: instance {i} closer than gap {min_gap}")
                break
    if len(scene.nucleus_classes) != int(scene.nucleus_map.max()):
        problems.append("nucleus class list length mismatch")
    return problems


# ---------------------------------------------------------------------------
# Samples, datasets, manifests
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One training/eval sample; segmentation fields are None for classification."""

    sample_id: str
    image: np.ndarray                 # (3,H,W) float32 in [0,1]
    patient: str
    fold: int
    task_id: str
    instance_map: np.ndarray | None = None
    instance_classes: list | None = None
    pixel_target: np.ndarray | None = None    # (H,W) int32 class map
    weight_map: np.ndarray | None = None      # (H,W) float32
    fg_mask: np.ndarray | None = None         # (H,W) uint8, subtype tasks only
    label: int | None = None                  # classification tasks only


@dataclass
class TaskDataset:
    task_id: str
    super_task_id: str
    input_hw: tuple
    samples: list

    def __len__(self):
        return len(self.samples)

    @property
    def patients(self):
        return sorted({s.patient for s in self.samples})


def build_manifest(samples: list, n_folds: int, rng: np.random.Generator) -> list:
    """Assign a fold to every sample record, grouping by patient.

    `samples` is a list of dicts each carrying at least a "patient" key.
    Patients are shuffled then greedily assigned to the currently lightest
    fold, which keeps per-fold sample counts within one patient's worth of
    balance. Returns the records with the "fold" key filled in.
    """
    patients = sorted({s["patient"] for s in samples})
    if len(patients) < n_folds:
        raise ValueError(f"need at least {n_folds} patients, got {len(patients)}")
    order = list(rng.permutation(len(patients)))
    counts = {p: sum(1 for s in samples if s["patient"] == p) for p in patients}
    # descending-size first so big patients land early on the lightest fold
    order.sort(key=lambda i: -counts[patients[i]])
    fold_load = [0] * n_folds
    fold_of = {}
    for i in order:
        f = fold_load.index(min(fold_load))
        fold_of[patients[i]] = f
        fold_load[f] += counts[patients[i]]
    for s in samples:
        s["fold"] = fold_of[s["patient"]]
    return samples


def _class_weight_floor(instance_maps: list) -> dict:
    """Inverse-frequency floor per class over a whole dataset (background=0, foreground=1)."""
    total = sum(m.size for m in instance_maps)
    fg = sum(int((m > 0).sum()) for m in instance_maps)
    bg = total - fg
    floors = {}
    for cls, count in ((0, bg), (1, fg)):
        floors[str(cls)] = total / (2.0 * count) if count else 1.0
    return floors


@dataclass
class CorpusSpec:
    """Whole-corpus generation: scene spec plus patient/fold/split structure."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    n_scenes: int = 32
    n_tissue_patches: int = 32
    tissue_canvas_hw: tuple = (32, 32)
    n_patients: int = 6
    n_folds: int = 3
    external_patients: int = 0           # extra held-out patients with a style shift
    external_scenes: int = 0
    external_style_strength: float = 0.25
    seed: int = 0


SEG_TASKS = ("gland", "lumen", "nucleus")


def _scene_records(corpus: CorpusSpec, rng):
    """Yield (split, name, SceneSpec) for every segmentation scene."""
    for i in range(corpus.n_scenes):
        patient = f"p{int(rng.integers(0, corpus.n_patients)):03d}"
        spec = SceneSpec(**{**asdict(corpus.scene),
                            "seed": corpus.seed * 1_000_003 + i,
                            "patient": patient})
        spec.canvas_hw = tuple(spec.canvas_hw)
        yield "train", f"scene_{i:04d}", spec
    for i in range(corpus.external_scenes):
        patient = f"x{int(rng.integers(0, max(1, corpus.external_patients))):03d}"
        spec = SceneSpec(**{**asdict(corpus.scene),
                            "seed": corpus.seed * 1_000_003 + corpus.n_scenes + i,
                            "patient": patient,
                            "style_strength": corpus.external_style_strength})
        spec.canvas_hw = tuple(spec.canvas_hw)
        yield "test", f"scene_{i + corpus.n_scenes:04d}", spec


def generate_corpus(root, corpus: CorpusSpec) -> dict:
    """Generate scenes + tissue patches under `root` and write per-task manifests.

    Layout: <root>/<task>/<split>/{images,labels}/... with one manifest.json
    per task directory. Returns {task_id: manifest_path}.
    """
    root = Path(root)
    rng = derive_rng(corpus.seed, "corpus")
    scenes = []
    for split, name, spec in _scene_records(corpus, rng):
        scene = generate_scene(spec)
        problems = validate_scene(scene, spec.min_gap)
        if problems:
            raise SceneGenerationError(f"{name}: " + "; ".join(problems))
        scenes.append((split, name, spec, scene))

    manifests = {}
    for task in SEG_TASKS:
        records = []
        maps = []
        for split, name, spec, scene in scenes:
            base = root / task / split
            (base / "images").mkdir(parents=True, exist_ok=True)
            (base / "labels").mkdir(parents=True, exist_ok=True)
            write_container(base / "images" / f"{name}.cbrs", scene.image)
            imap = getattr(scene, f"{task}_map")
            write_container(base / "labels" / f"{name}.cbrs", imap)
            rec = {"sample_id": name,
                   "image": f"{split}/images/{name}.cbrs",
                   "label": f"{split}/labels/{name}.cbrs",
                   "patient": spec.patient, "split": split}
            if task == "nucleus":
                sidecar = base / "labels" / f"{name}_classes.json"
                sidecar.write_text(json.dumps(scene.nucleus_classes))
                rec["classes"] = f"{split}/labels/{name}_classes.json"
            records.append(rec)
            if split == "train":
                maps.append(imap)
        train_records = [r for r in records if r["split"] == "train"]
        build_manifest(train_records, corpus.n_folds, derive_rng(corpus.seed, f"folds/{task}"))
        for r in records:
            r.setdefault("fold", -1)   # external split sits outside the folds
        manifest = {"format_version": MANIFEST_VERSION, "dataset_id": task,
                    "task_id": task, "super_task_id": "seg",
                    "input_hw": list(corpus.scene.canvas_hw),
                    "class_weight_floor": _class_weight_floor(maps),
                    "samples": records}
        path = root / task / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        manifests[task] = path

    # tissue patches: small scenes, label from gland-area rule
    records = []
    trng = derive_rng(corpus.seed, "tissue")
    for i in range(corpus.n_tissue_patches):
        patient = f"p{int(trng.integers(0, corpus.n_patients)):03d}"
        spec = SceneSpec(**{**asdict(corpus.scene),
                            "canvas_hw": tuple(corpus.tissue_canvas_hw),
                            "gland_count": (0, 2),
                            "gland_axes": (4, 8),
                            "nucleus_count": (1, 4),
                            "nucleus_radius": (2, 3),
                            "seed": corpus.seed * 2_000_003 + i,
                            "patient": patient})
        scene = generate_scene(spec)
        name = f"patch_{i:04d}"
        base = root / "tissue" / "train"
        (base / "images").mkdir(parents=True, exist_ok=True)
        write_container(base / "images" / f"{name}.cbrs", scene.image)
        records.append({"sample_id": name,
                        "image": f"train/images/{name}.cbrs",
                        "tissue_label": scene.tissue_label,
                        "patient": patient, "split": "train"})
    build_manifest(records, corpus.n_folds, derive_rng(corpus.seed, "folds/tissue"))
    manifest = {"format_version": MANIFEST_VERSION, "dataset_id": "tissue",
                "task_id": "tissue", "super_task_id": "cls",
                "input_hw": list(corpus.tissue_canvas_hw),
                "n_classes": 3,
                "samples": records}
    path = root / "tissue" / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    manifests["tissue"] = path
    return manifests


def validate_dataset(manifest_path) -> dict:
    """Integrity report for one task dataset; never raises, lists violations."""
    manifest_path = Path(manifest_path)
    violations = []
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return {"violations": [f"manifest unreadable: {exc}"], "n_samples": 0}
    root = manifest_path.parent
    hw = tuple(manifest.get("input_hw", ()))
    fold_of_patient = {}
    for rec in manifest.get("samples", []):
        sid = rec.get("sample_id", "?")
        patient, fold = rec.get("patient"), rec.get("fold")
        if rec.get("split") == "train":
            if patient in fold_of_patient and fold_of_patient[patient] != fold:
                violations.append(f"{sid}: patient {patient} appears in folds "
                                  f"{fold_of_patient[patient]} and {fold}")
            fold_of_patient.setdefault(patient, fold)
        for key in ("image", "label"):
            if key not in rec:
                continue
            path = root / rec[key]
            if not path.exists():
                violations.append(f"{sid}: missing file {rec[key]}")
                continue
            try:
                arr = read_container(path)
            except ContainerError as exc:
                violations.append(f"{sid}: {rec[key]}: {exc.code}")
                continue
            if arr.shape[-2:] != hw:
                violations.append(f"{sid}: {rec[key]}: shape {arr.shape} vs input {hw}")
            if key == "label":
                n = int(arr.max()) if arr.size else 0
                ids = np.unique(arr[arr > 0])
                if len(ids) != n:
                    violations.append(f"{sid}: {rec[key]}: ids not contiguous")
                if arr.min() < 0:
                    violations.append(f"{sid}: {rec[key]}: negative label")
        if "tissue_label" in rec:
            if not 0 <= rec["tissue_label"] < manifest.get("n_classes", 3):
                violations.append(f"{sid}: tissue label {rec['tissue_label']} out of range")
    return {"violations": violations, "n_samples": len(manifest.get("samples", []))}


def load_task_dataset(manifest_path, split="train", folds=None, target_builder=None) -> TaskDataset:
    """Materialize a TaskDataset in memory.

    `target_builder(sample, manifest_record, manifest)` fills the training
    target fields; segmentation schemes live in `instances`/`trainer` so this
    loader stays format-only. Classification labels come from the manifest.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    samples = []
    for rec in manifest["samples"]:
        if rec.get("split") != split:
            continue
        if folds is not None and rec.get("fold") not in folds:
            continue
        image = read_container(root / rec["image"]).astype(np.float32) / 255.0
        sample = Sample(sample_id=rec["sample_id"], image=image,
                        patient=rec["patient"], fold=rec.get("fold", -1),
                        task_id=manifest["task_id"])
        if "label" in rec:
            sample.instance_map = read_container(root / rec["label"]).astype(np.int32)
            if "classes" in rec:
                sample.instance_classes = json.loads((root / rec["classes"]).read_text())
        if "tissue_label" in rec:
            sample.label = int(rec["tissue_label"])
        if target_builder is not None:
            target_builder(sample, rec, manifest)
        samples.append(sample)
    return TaskDataset(task_id=manifest["task_id"],
                       super_task_id=manifest["super_task_id"],
                       input_hw=tuple(manifest["input_hw"]),
                       samples=samples)
