"""Stage runner: scene generation through reporting, with manifests and hashes.

Every stage records, in ``<out>/manifest.json``, a hash of the config
sections it depends on (plus its upstream stage hashes), the sha256 of each
input file and of each output file. A stage whose record matches is skipped;
one whose record was produced under a different config is refused unless
``force`` is set.
"""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import os
import shutil
import time
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import dataset, imageio
from .config import PipelineConfig, canonical_hash, dump_config
from .depthnet import DepthNetwork, PretrainConfig, predict_inverse_depth, pretrain_teacher
from .diffusion import (Denoiser, attach_control, evaluate_loss, make_schedule, sample_noise_batch,
                        to_model_range, train_control_step, train_denoiser_step)
from .diffusion.control import condition_planes
from .diffusion.sampling import edge_correlation, generate_hard
from .distill import (AugmentConfig, DistillConfig, build_pairs, diffusion_hard_images, finetune_student,
                      hard_seed, oracle_hard_images)
from .errors import ConfigError, MissingDependencyError
from .evalsuite import emit_report, mask_hash, masked_eval
from .numerics import checkpoint
from .numerics import tensor as T
from .numerics.optim import AdamW
from .scenegen import (ConditionTag, DepthMap, OracleParams, SceneSpec, apply_condition_oracle, generate_scene,
                       normalized_inverse_depth)

log = logging.getLogger(__name__)

STAGES = ("gen-scenes", "train-diffusion", "gen-hard", "pretrain-teacher", "distill", "eval", "report")
MANIFEST = "manifest.json"
LOCK = ".ddl.lock"


# ------------------------------------------------------------------ helpers
def derive_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(base), *keys]).generate_state(1)[0])


def _rng(cfg: PipelineConfig, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, key]))


def scene_spec(cfg: PipelineConfig) -> SceneSpec:
    s = cfg.scenes
    return SceneSpec(height=s.resolution[0], width=s.resolution[1], n_objects=tuple(s.n_objects),
                     d_min=s.d_min, d_max=s.d_max, tom_fraction=s.tom_fraction)


def oracle_params(cfg: PipelineConfig) -> OracleParams:
    return OracleParams().scaled(cfg.conditions.strength)


def tags_of(cfg: PipelineConfig) -> tuple[ConditionTag, ...]:
    return tuple(ConditionTag.parse(t) for t in cfg.conditions.tags)


def schedule_of(cfg: PipelineConfig):
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_1, d.beta_T)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive lock file for one output directory."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        pid = path.read_text().strip() if path.exists() else ""
        if pid.isdigit() and not _alive(int(pid)):
            log.warning("removing stale lock left by pid %s", pid)
            path.unlink()
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        else:
            raise RuntimeError(f"{out} is locked by another run (pid {pid or '?'}); remove {path} if stale")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# ------------------------------------------------------------------ stage table
@dataclasses.dataclass(frozen=True)
class Stage:
    name: str
    sections: tuple[str, ...]
    run: Callable[["Run"], list[Path]]

    def key(self, cfg: PipelineConfig) -> str:
        return f"{self.name}[{cfg.eval.align}]" if self.name in ("eval", "report") else self.name


def upstream(name: str, cfg: PipelineConfig) -> tuple[str, ...]:
    oracle = cfg.gen_hard.source == "oracle"
    return {
        "gen-scenes": (),
        "train-diffusion": ("gen-scenes",),
        "gen-hard": ("gen-scenes",) if oracle else ("gen-scenes", "train-diffusion"),
        "pretrain-teacher": ("gen-scenes",),
        "distill": ("gen-scenes", "gen-hard", "pretrain-teacher"),
        "eval": ("gen-scenes", "pretrain-teacher", "distill"),
        "report": ("eval",),
    }[name]


def stages_for_all(cfg: PipelineConfig) -> list[str]:
    """Dependency order; the oracle ablation needs no diffusion model."""
    if cfg.gen_hard.source == "oracle":
        return [s for s in STAGES if s != "train-diffusion"]
    return list(STAGES)


class Run:
    """One pipeline invocation over an output directory."""

    def __init__(self, cfg: PipelineConfig, out: Path, force: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.force = force
        self.manifest_path = self.out / MANIFEST
        self.manifest = dataset.read_json(self.manifest_path) if self.manifest_path.exists() else {"stages": {}}

    # -------------------------------------------------------------- records
    def record(self, name: str) -> dict | None:
        key = STAGE_TABLE[name].key(self.cfg)
        return self.manifest["stages"].get(key)

    def require(self, name: str) -> dict:
        rec = self.record(name)
        if rec is None:
            raise MissingDependencyError(f"missing outputs of stage '{name}' in {self.out}; run `ddl {name}` first",
                                         producer=name)
        for rel, digest in rec["outputs"].items():
            path = self.out / rel
            if not path.exists():
                raise MissingDependencyError(f"{path} (produced by '{name}') is missing; rerun `ddl {name}`",
                                             producer=name)
        return rec

    def stage_hash(self, name: str) -> str:
        stage = STAGE_TABLE[name]
        d = self.cfg.to_dict()
        parts = {"stage": stage.key(self.cfg), "config": {s: d[s] for s in stage.sections}}
        parts["upstream"] = {u: self.stage_hash(u) for u in upstream(name, self.cfg)}
        return canonical_hash(parts)

    def _input_hashes(self, name: str) -> dict:
        return {u: self.require(u)["outputs_digest"] for u in upstream(name, self.cfg)}

    def _save_manifest(self) -> None:
        self.manifest["config_hash"] = canonical_hash(self.cfg.to_dict())
        self.manifest["config"] = "config.yaml"
        (self.out / "config.yaml").write_text(dump_config(self.cfg))
        dataset.write_json(self.manifest_path, self.manifest)

    def up_to_date(self, name: str) -> bool:
        rec = self.record(name)
        if rec is None:
            return False
        h = self.stage_hash(name)
        if rec["stage_hash"] != h:
            if not self.force:
                raise ConfigError(
                    f"stage '{name}' outputs in {self.out} were produced with a different config "
                    f"(hash {rec['stage_hash'][:12]} != {h[:12]}); use --force to overwrite")
            return False
        try:
            if rec["inputs"] != self._input_hashes(name):
                return False
        except MissingDependencyError:
            return False
        return all((self.out / rel).exists() and dataset.file_sha256(self.out / rel) == digest
                   for rel, digest in rec["outputs"].items())

    def run_stage(self, name: str) -> bool:
        """Run ``name`` unless up to date. Returns True if work was done."""
        if self.up_to_date(name):
            log.info("%s: up to date", name)
            return False
        inputs = self._input_hashes(name)
        stage = STAGE_TABLE[name]
        key = stage.key(self.cfg)
        t0 = time.perf_counter()
        log.info("%s: running", name)
        self.manifest["stages"].pop(key, None)
        outputs = stage.run(self)
        rels = sorted(str(p.relative_to(self.out)) for p in outputs)
        digests = {rel: dataset.file_sha256(self.out / rel) for rel in rels}
        self.manifest["stages"][key] = {
            "stage": name,
            "producer": name,
            "stage_hash": self.stage_hash(name),
            "inputs": inputs,
            "outputs": digests,
            "outputs_digest": canonical_hash(digests),
        }
        self._save_manifest()
        log.info("%s: done in %.1fs", name, time.perf_counter() - t0)
        return True

    def stage_dir(self, name: str, clean: bool = False) -> Path:
        d = self.out / name
        if clean and d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def scenes_manifest(self) -> dict:
        self.require("gen-scenes")
        return dataset.read_json(self.out / "gen-scenes" / MANIFEST)


# ------------------------------------------------------------------ gen-scenes
def run_gen_scenes(run: Run) -> list[Path]:
    cfg = run.cfg
    root = run.stage_dir("gen-scenes", clean=True)
    spec, params, tags = scene_spec(cfg), oracle_params(cfg), tags_of(cfg)
    counts = {"diffusion": cfg.scenes.diffusion_corpus, "train": cfg.scenes.train,
              "val": cfg.scenes.val, "test": cfg.scenes.test}
    entries = []
    for split, count in counts.items():
        for i in range(count):
            seed = dataset.scene_seed(cfg.seed, split, i)
            scene = generate_scene(seed, spec, f"{split}-{i:05d}")
            entry = dataset.save_scene(root, split, scene)
            if split != "train":
                # oracle-hard counterparts: diffusion training targets, validation and test sets
                for tag in tags:
                    hs = hard_seed(cfg.seed, seed, tag)
                    rel = f"{split}/{scene.id}_{tag.value}.ppm"
                    imageio.write_ppm(root / rel, apply_condition_oracle(scene, tag, hs, params))
                    entry["conditions"][tag.value] = {"file": rel, "seed": hs, "source": "oracle"}
            entries.append(entry)
    manifest = {
        "producer": "gen-scenes",
        "spec": dataclasses.asdict(spec),
        "oracle": dataclasses.asdict(params),
        "conditions": [t.value for t in tags],
        "splits": counts,
        "scenes": entries,
    }
    dataset.write_json(root / MANIFEST, manifest)
    outputs = [root / rel for rel in dataset.files_of(manifest)]
    return outputs + [root / MANIFEST]


# ------------------------------------------------------------------ train-diffusion
class _Resumable:
    """Periodic training snapshots (parameters, Adam moments, RNG state)."""

    def __init__(self, path: Path, stage_hash: str):
        self.path, self.stage_hash = path, stage_hash

    def load(self, module, opt: AdamW, rng: np.random.Generator):
        meta_path = self.path.with_suffix(".json")
        if not (self.path.exists() and meta_path.exists()):
            return 0, []
        meta = dataset.read_json(meta_path)
        if meta.get("stage_hash") != self.stage_hash:
            return 0, []
        blob = checkpoint.load(self.path)
        module.load_state_dict({k[2:]: v for k, v in blob.items() if k.startswith("p/")})
        n = len(opt.params)
        opt.state.m = [blob[f"m/{i}"].copy() for i in range(n)] if meta["t"] else []
        opt.state.v = [blob[f"v/{i}"].copy() for i in range(n)] if meta["t"] else []
        opt.state.t = meta["t"]
        opt.lr = meta["lr"]
        rng.bit_generator.state = meta["rng"]
        log.info("resuming %s at step %d", self.path.stem, meta["step"])
        return meta["step"], meta["rows"]

    def save(self, step: int, rows, module, opt: AdamW, rng: np.random.Generator) -> None:
        blob = {f"p/{k}": v for k, v in module.state_dict().items()}
        for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
            blob[f"m/{i}"], blob[f"v/{i}"] = m, v
        checkpoint.save(self.path, blob)
        dataset.write_json(self.path.with_suffix(".json"), {
            "stage_hash": self.stage_hash, "step": step, "t": opt.state.t, "lr": opt.lr,
            "rng": rng.bit_generator.state, "rows": rows})

    def clear(self) -> None:
        for p in (self.path, self.path.with_suffix(".json")):
            with contextlib.suppress(FileNotFoundError):
                p.unlink()


def _train(step_fn, module, opt, rng, steps: int, snap: _Resumable, every: int = 250) -> list:
    start, rows = snap.load(module, opt, rng)
    for it in range(start, steps):
        rows.append([it + 1, step_fn(rng)])
        if (it + 1) % every == 0 and it + 1 < steps:
            snap.save(it + 1, rows, module, opt, rng)
    snap.clear()
    return rows


def _cond_stack(scenes, tags, conditions) -> np.ndarray:
    return np.stack([condition_planes(normalized_inverse_depth(DepthMap(s.depth, s.valid)), t, conditions)
                     for s, t in zip(scenes, tags)]).astype(T.get_default_dtype())


def load_denoiser(cfg: PipelineConfig, path: Path) -> Denoiser:
    d = cfg.diffusion
    net = Denoiser(3, tuple(d.channels), d.time_dim, seed=derive_seed(cfg.seed, 11))
    net.load_state_dict(checkpoint.load(path))
    return net


def load_controlled(cfg: PipelineConfig, denoiser_path: Path, control_path: Path):
    model = attach_control(load_denoiser(cfg, denoiser_path), tags_of(cfg), seed=derive_seed(cfg.seed, 12))
    model.control.load_state_dict(checkpoint.load(control_path))
    return model


def run_train_diffusion(run: Run) -> list[Path]:
    cfg, d = run.cfg, run.cfg.diffusion
    root = run.stage_dir("train-diffusion")
    scenes_root = run.out / "gen-scenes"
    manifest = run.scenes_manifest()
    corpus = dataset.load_split(scenes_root, manifest, "diffusion")
    heldout = dataset.load_split(scenes_root, manifest, "val", limit=d.heldout)
    tags = tags_of(cfg)
    schedule = schedule_of(cfg)
    stage_hash = run.stage_hash("train-diffusion")

    denoiser = Denoiser(3, tuple(d.channels), d.time_dim, seed=derive_seed(cfg.seed, 11))
    easy = dataset.stack_images(corpus)
    held_easy = dataset.stack_images(heldout)
    untrained = evaluate_loss(denoiser, held_easy, schedule, seed=derive_seed(cfg.seed, 13))
    rng = _rng(cfg, 14)
    opt = AdamW(denoiser.trainable_parameters(), lr=d.lr)

    def uncond_step(rng):
        idx = rng.choice(len(easy), size=min(d.batch_size, len(easy)), replace=False)
        x0 = to_model_range(easy[idx])
        t, eps = sample_noise_batch(rng, x0, schedule)
        return train_denoiser_step(denoiser, opt, x0, t, eps, schedule)

    rows = _train(uncond_step, denoiser, opt, rng, d.steps, _Resumable(root / "denoiser_resume.ddl", stage_hash))
    _write_csv(root / "denoiser_log.csv", ["step", "loss"], rows)
    trained = evaluate_loss(denoiser, held_easy, schedule, seed=derive_seed(cfg.seed, 13))
    checkpoint.save(root / "denoiser.ddl", denoiser.state_dict())

    # control branch: oracle-hard corpus images under their tag plus easy images with no tag
    images, cond_scenes, cond_tags = [], [], []
    for s in corpus:
        for tag in tags:
            images.append(s.hard[tag])
            cond_scenes.append(s)
            cond_tags.append(tag)
        images.append(s.easy)
        cond_scenes.append(s)
        cond_tags.append(None)
    images = np.stack(images)
    cond = _cond_stack(cond_scenes, cond_tags, tags)
    model = attach_control(denoiser, tags, seed=derive_seed(cfg.seed, 12))
    rng = _rng(cfg, 15)
    opt_c = AdamW(model.trainable_parameters(), lr=d.lr)

    def control_step(rng):
        idx = rng.choice(len(images), size=min(d.batch_size, len(images)), replace=False)
        x0 = to_model_range(images[idx])
        t, eps = sample_noise_batch(rng, x0, schedule)
        return train_control_step(model, opt_c, x0, cond[idx], t, eps, schedule)

    rows = _train(control_step, model.control, opt_c, rng, d.control_steps,
                  _Resumable(root / "control_resume.ddl", stage_hash))
    _write_csv(root / "control_log.csv", ["step", "loss"], rows)
    checkpoint.save(root / "control.ddl", model.control.state_dict())

    held_hard = np.stack([s.hard[t] for s in heldout for t in tags])
    held_cond = _cond_stack([s for s in heldout for _ in tags], [t for _ in heldout for t in tags], tags)
    eval_seed = derive_seed(cfg.seed, 16)
    hard_uncond = evaluate_loss(denoiser, held_hard, schedule, seed=eval_seed)
    hard_cond = evaluate_loss(model, held_hard, schedule, seed=eval_seed, cond=held_cond)
    metrics = {
        "heldout_untrained": untrained, "heldout_trained": trained, "heldout_ratio": trained / untrained,
        "hard_unconditional": hard_uncond, "hard_conditional": hard_cond,
        "hard_ratio": hard_cond / hard_uncond,
        "heldout_images": len(held_easy), "heldout_hard_images": len(held_hard),
        "schedule": schedule.to_dict(),
        "denoiser_parameters": denoiser.num_parameters(),
        "control_parameters": int(sum(p.data.size for p in model.trainable_parameters())),
    }
    dataset.write_json(root / "metrics.json", metrics)
    return [root / n for n in ("denoiser.ddl", "control.ddl", "denoiser_log.csv", "control_log.csv", "metrics.json")]


# ------------------------------------------------------------------ gen-hard
def _hard_targets(cfg: PipelineConfig, manifest) -> list[dict]:
    entries = [e for e in manifest["scenes"] if e["split"] == "train"]
    entries += [e for e in manifest["scenes"] if e["split"] == "val"][:cfg.gen_hard.val_scenes]
    return entries


def run_gen_hard(run: Run) -> list[Path]:
    cfg = run.cfg
    root = run.stage_dir("gen-hard")
    scenes_root = run.out / "gen-scenes"
    manifest = run.scenes_manifest()
    entries = _hard_targets(cfg, manifest)
    tags = tags_of(cfg)
    spec = scene_spec(cfg)
    base = derive_seed(cfg.seed, 21)
    stage_hash = run.stage_hash("gen-hard")
    progress_path = root / "progress.json"
    progress = dataset.read_json(progress_path) if progress_path.exists() else {}
    if progress.get("stage_hash") != stage_hash:
        shutil.rmtree(root)
        root.mkdir(parents=True)
        progress = {"stage_hash": stage_hash, "done": []}
    done = set(progress["done"])

    generator: dict = {"source": cfg.gen_hard.source, "base_seed": base}
    if cfg.gen_hard.source == "diffusion":
        rec = run.require("train-diffusion")
        den, ctl = run.out / "train-diffusion" / "denoiser.ddl", run.out / "train-diffusion" / "control.ddl"
        model = load_controlled(cfg, den, ctl)
        schedule = schedule_of(cfg)
        generator.update({"checkpoint": {"denoiser": rec["outputs"]["train-diffusion/denoiser.ddl"],
                                         "control": rec["outputs"]["train-diffusion/control.ddl"]},
                          "schedule": schedule.to_dict(), "sampler": "ancestral"})

    chunk = cfg.diffusion.sample_batch
    records = []
    for start in range(0, len(entries), chunk):
        block = entries[start:start + chunk]
        key = f"{start}"
        scenes = [dataset.load_entry(scenes_root, e, with_hard=False).as_scene(spec) for e in block]
        if key not in done:
            if cfg.gen_hard.source == "diffusion":
                images = diffusion_hard_images(scenes, tags, base, model, schedule,
                                               checkpoint_id=generator["checkpoint"]["control"], batch_size=chunk)
            else:
                regenerated = [generate_scene(s.seed, spec, s.id) for s in scenes]
                images = oracle_hard_images(regenerated, tags, base, oracle_params(cfg))
            for (sid, tag), (img, _) in images.items():
                split = sid.split("-")[0]
                (root / split).mkdir(exist_ok=True)
                imageio.write_ppm(root / split / f"{sid}_{tag.value}.ppm", img)
            done.add(key)
            progress["done"] = sorted(done, key=int)
            dataset.write_json(progress_path, progress)
            log.info("gen-hard: %d/%d scenes", min(start + len(block), len(entries)), len(entries))
        for s in scenes:
            split = s.id.split("-")[0]
            for tag in tags:
                records.append({"scene_id": s.id, "split": split, "condition": tag.value,
                                "file": f"{split}/{s.id}_{tag.value}.ppm",
                                "seed": hard_seed(base, s.seed, tag)})

    stats = _hard_stats(root, scenes_root, manifest, records, tags)
    # baseline: the same generator with no condition tag set
    probes = [dataset.load_entry(scenes_root, e, with_hard=False).as_scene(spec) for e in entries[:IDENTITY_PROBE]]
    if cfg.gen_hard.source == "diffusion":
        plain = generate_hard(model, [s.depth for s in probes], [None] * len(probes),
                              [derive_seed(base, s.seed) for s in probes], schedule, batch_size=chunk)
    else:
        plain = np.stack([s.easy_image for s in probes])
    stats["photometric_shift"]["none"] = float(np.mean([np.abs(h - s.easy_image).mean()
                                                        for h, s in zip(plain, probes)]))
    dataset.write_json(root / "metrics.json", stats)
    dataset.write_json(root / MANIFEST, {"producer": "gen-hard", "generator": generator,
                                         "conditions": [t.value for t in tags], "images": records})
    progress_path.unlink()
    return [root / r["file"] for r in records] + [root / MANIFEST, root / "metrics.json"]


IDENTITY_PROBE = 16


def _hard_stats(root: Path, scenes_root: Path, manifest, records, tags, probe: int = 100) -> dict:
    """Depth-consistency probe and per-condition photometric shift of the hard set."""
    by_id = {e["id"]: e for e in manifest["scenes"]}
    shift = {t.value: [] for t in tags}
    corr = []
    for r in records[:probe]:
        e = by_id[r["scene_id"]]
        easy = imageio.read_ppm(scenes_root / e["files"]["easy"])
        depth = imageio.read_pfm(scenes_root / e["files"]["depth"]).astype(np.float64)
        valid = imageio.read_pgm(scenes_root / e["files"]["valid"]) > 0
        hard = imageio.read_ppm(root / r["file"])
        shift[r["condition"]].append(float(np.abs(hard - easy).mean()))
        inv = np.where(valid, 1.0 / depth, 0.0)
        corr.append(edge_correlation(hard, inv))
    return {"edge_correlation_mean": float(np.mean(corr)) if corr else None,
            "photometric_shift": {k: float(np.mean(v)) for k, v in shift.items() if v},
            "probe_images": len(corr)}


# ------------------------------------------------------------------ pretrain-teacher
def teacher_network(cfg: PipelineConfig, role: str = "teacher") -> DepthNetwork:
    return DepthNetwork(tuple(cfg.teacher.channels), tuple(cfg.scenes.resolution), role=role,
                        seed=derive_seed(cfg.seed, 31))


def _easy_scores(net, scenes, cfg) -> dict:
    preds = predict_inverse_depth(net, dataset.stack_images(scenes))
    reports = masked_eval(preds, [s.depth for s in scenes], [s.valid for s in scenes],
                          [s.material for s in scenes], "easy", cfg.scenes.d_min, cfg.scenes.d_max)
    r = reports[0]
    return {"absrel": r.absrel, "delta_1.25": r.delta[1.25] if 1.25 in r.delta else None, "n": r.n}


def run_pretrain_teacher(run: Run) -> list[Path]:
    cfg, t = run.cfg, run.cfg.teacher
    root = run.stage_dir("pretrain-teacher")
    scenes_root = run.out / "gen-scenes"
    manifest = run.scenes_manifest()
    train = dataset.load_split(scenes_root, manifest, "train", with_hard=False)
    val = dataset.load_split(scenes_root, manifest, "val", with_hard=False)
    net = teacher_network(cfg)
    before = _easy_scores(net, val, cfg)
    inv = np.stack([np.where(s.valid, 1.0 / s.depth, 0.0) for s in train])
    pcfg = PretrainConfig(iterations=t.iterations, batch_size=t.batch_size, lr=t.lr, decay_at=t.decay_at,
                          decayed_lr=t.decayed_lr, weight_decay=t.weight_decay, seed=derive_seed(cfg.seed, 32))
    pretrain_teacher(net, dataset.stack_images(train), inv, np.stack([s.valid for s in train]), pcfg,
                     log_path=root / "log.csv", checkpoint_path=root / "teacher.ddl")
    after = _easy_scores(net, val, cfg)
    dataset.write_json(root / "metrics.json", {"untrained_val_easy": before, "trained_val_easy": after,
                                               "absrel_improvement": before["absrel"] / after["absrel"],
                                               "parameters": net.num_parameters()})
    return [root / "teacher.ddl", root / "log.csv", root / "metrics.json"]


def load_depth_network(cfg: PipelineConfig, path: Path, role: str) -> DepthNetwork:
    net = teacher_network(cfg, role)
    net.load_state_dict(checkpoint.load(path))
    return net


# ------------------------------------------------------------------ distill
def _hard_lookup(run: Run) -> tuple[dict, dict]:
    run.require("gen-hard")
    root = run.out / "gen-hard"
    man = dataset.read_json(root / MANIFEST)
    table = {}
    for r in man["images"]:
        table[(r["scene_id"], ConditionTag.parse(r["condition"]))] = (
            imageio.read_ppm(root / r["file"]), {"source": man["generator"]["source"], "seed": r["seed"],
                                                  "file": f"gen-hard/{r['file']}"})
    return table, man


def run_distill(run: Run) -> list[Path]:
    cfg, k = run.cfg, run.cfg.distill
    root = run.stage_dir("distill", clean=True)
    scenes_root = run.out / "gen-scenes"
    manifest = run.scenes_manifest()
    spec = scene_spec(cfg)
    tags = tags_of(cfg)
    teacher_rec = run.require("pretrain-teacher")
    teacher_path = run.out / "pretrain-teacher" / "teacher.ddl"
    teacher_id = teacher_rec["outputs"]["pretrain-teacher/teacher.ddl"]
    teacher = load_depth_network(cfg, teacher_path, "teacher").freeze()
    teacher_digest = checkpoint.digest(teacher.state_dict())
    hard, hard_manifest = _hard_lookup(run)

    train = [s.as_scene(spec) for s in dataset.load_split(scenes_root, manifest, "train", with_hard=False)]
    val = [s.as_scene(spec) for s in dataset.load_split(scenes_root, manifest, "val", with_hard=False,
                                                        limit=cfg.gen_hard.val_scenes)]
    pairs = build_pairs(train, tags, teacher, hard)
    val_pairs = build_pairs(val, tags, teacher, hard)

    (root / "labels").mkdir()
    pair_rows, seen = [], set()
    for p in pairs:
        label_rel = f"labels/{p.scene_id}.pfm"
        if p.scene_id not in seen:
            imageio.write_pfm(root / label_rel, p.pseudo_label)
            seen.add(p.scene_id)
        pair_rows.append({"scene_id": p.scene_id, "condition": p.condition.value if p.condition else None,
                          "image": p.provenance.get("file", f"gen-scenes/train/{p.scene_id}_easy.ppm"),
                          "pseudo_label": f"distill/{label_rel}", "seed": p.provenance.get("seed")})
    dataset.write_json(root / "pairs.json", {"producer": "distill", "teacher_checkpoint": teacher_id,
                                             "generator": hard_manifest["generator"], "pairs": pair_rows})

    dcfg = DistillConfig(iterations=k.iterations, lr=k.lr, decay_at=k.decay_at, decayed_lr=k.decayed_lr,
                         batch_size=k.batch_size, weight_decay=k.weight_decay, rho=k.rho,
                         augment=AugmentConfig(k.jitter, k.rgb_shift, k.flip), use_augment=k.augment,
                         val_every=k.val_every, seed=derive_seed(cfg.seed, 41))
    student = teacher.as_student()
    result = finetune_student(student, pairs, dcfg, val_pairs=val_pairs, log_path=root / "log.csv",
                              checkpoint_path=root / "student.ddl")
    if checkpoint.digest(teacher.state_dict()) != teacher_digest:
        raise RuntimeError("teacher parameters changed during distillation")
    dataset.write_json(root / "metrics.json", {"best_iteration": result.best_iteration, "best_val_loss": result.best_val,
                                               "train_samples": len(pairs), "val_samples": len(val_pairs),
                                               "teacher_checkpoint": teacher_id})
    labels = sorted((root / "labels").iterdir())
    return [root / n for n in ("student.ddl", "log.csv", "pairs.json", "metrics.json")] + labels


# ------------------------------------------------------------------ eval
def run_eval(run: Run) -> list[Path]:
    cfg = run.cfg
    align = cfg.eval.align
    root = run.stage_dir("eval")
    scenes_root = run.out / "gen-scenes"
    manifest = run.scenes_manifest()
    tags = tags_of(cfg)
    test = dataset.load_split(scenes_root, manifest, "test")
    models = {
        "teacher": (run.out / "pretrain-teacher" / "teacher.ddl",
                    run.require("pretrain-teacher")["outputs"]["pretrain-teacher/teacher.ddl"]),
        "student": (run.out / "distill" / "student.ddl", run.require("distill")["outputs"]["distill/student.ddl"]),
    }
    splits = {"easy": np.stack([s.easy for s in test])}
    for tag in tags:
        splits[tag.value] = np.stack([s.hard[tag] for s in test])
    gts = [s.depth for s in test]
    valids = [s.valid for s in test]
    materials = [s.material for s in test]
    reports, outputs = [], []
    d_min, d_max = cfg.scenes.d_min, cfg.scenes.d_max
    for name, (path, _) in models.items():
        net = load_depth_network(cfg, path, name)
        hard_preds = []
        for split, images in splits.items():
            preds = predict_inverse_depth(net, images)
            pred_dir = root / "predictions" / name / split
            pred_dir.mkdir(parents=True, exist_ok=True)
            for s, p in zip(test, preds):
                imageio.write_pfm(pred_dir / f"{s.id}.pfm", p)
                outputs.append(pred_dir / f"{s.id}.pfm")
            reports += masked_eval(preds, gts, valids, materials, split, d_min, d_max, align, cfg.eval.taus, name)
            if split != "easy":
                hard_preds.append(preds)
        # pooled over every condition: the oracle-hard test set as a whole
        n = len(tags)
        reports += masked_eval(np.concatenate(hard_preds), gts * n, valids * n, materials * n, "hard",
                               d_min, d_max, align, cfg.eval.taus, name)
    provenance = {
        "alignment": align,
        "taus": list(cfg.eval.taus),
        "checkpoints": {k: v[1] for k, v in models.items()},
        "mask_hashes": {"valid": mask_hash(valids), "material": mask_hash(materials)},
        "test_scenes": len(test),
        "generator": dataset.read_json(run.out / "gen-hard" / MANIFEST)["generator"],
        "config_hash": canonical_hash(cfg.to_dict()),
    }
    out = root / f"metrics_{align}.json"
    dataset.write_json(out, {"provenance": provenance, "reports": [_report_dict(r) for r in reports]})
    return sorted(outputs) + [out]


def _report_dict(r) -> dict:
    d = dataclasses.asdict(r)
    d["delta"] = {f"{t:g}": v for t, v in r.delta.items()}
    return d


def _report_from_dict(d: Mapping):
    from .evalsuite import MetricsReport
    d = dict(d)
    d["delta"] = {float(k): v for k, v in d["delta"].items()}
    return MetricsReport(**d)


# ------------------------------------------------------------------ report
def efficacy_summary(reports, tau: float = 1.25) -> dict:
    """Student minus teacher delta_tau on the pooled hard split, and the easy-split drop."""
    def pick(model, split):
        for r in reports:
            if r.model == model and r.split == split and r.category == "All":
                return r.delta[tau]
        return None
    t_hard, s_hard = pick("teacher", "hard"), pick("student", "hard")
    t_easy, s_easy = pick("teacher", "easy"), pick("student", "easy")
    out = {"tau": tau, "teacher_hard": t_hard, "student_hard": s_hard, "teacher_easy": t_easy, "student_easy": s_easy}
    if None not in (t_hard, s_hard, t_easy, s_easy):
        out["hard_gain"] = s_hard - t_hard
        out["easy_drop"] = t_easy - s_easy
    return out


def run_report(run: Run) -> list[Path]:
    cfg = run.cfg
    run.require("eval")
    doc = dataset.read_json(run.out / "eval" / f"metrics_{cfg.eval.align}.json")
    reports = [_report_from_dict(d) for d in doc["reports"]]
    provenance = dict(doc["provenance"])
    provenance["efficacy"] = efficacy_summary(reports)
    # the default alignment writes at the top level; others get their own folder
    out_dir = run.out if cfg.eval.align == "lse" else run.stage_dir(f"report-{cfg.eval.align}")
    paths = emit_report(reports, out_dir, provenance, cfg.eval.taus)
    return list(paths)


STAGE_TABLE = {
    "gen-scenes": Stage("gen-scenes", ("seed", "scenes", "conditions"), run_gen_scenes),
    "train-diffusion": Stage("train-diffusion", ("seed", "diffusion"), run_train_diffusion),
    "gen-hard": Stage("gen-hard", ("seed", "gen_hard", "diffusion"), run_gen_hard),
    "pretrain-teacher": Stage("pretrain-teacher", ("seed", "teacher"), run_pretrain_teacher),
    "distill": Stage("distill", ("seed", "distill", "gen_hard"), run_distill),
    "eval": Stage("eval", ("seed", "eval"), run_eval),
    "report": Stage("report", ("seed", "eval"), run_report),
}


def run_pipeline(stage: str, cfg: PipelineConfig, out: Path, force: bool = False) -> Run:
    """Run one stage (or ``all``) under the output-directory lock."""
    out = Path(out)
    names = stages_for_all(cfg) if stage == "all" else [stage]
    if stage != "all" and stage not in STAGE_TABLE:
        raise ConfigError(f"unknown stage {stage!r}")
    with output_lock(out):
        run = Run(cfg, out, force=force)
        for name in names:
            run.run_stage(name)
    return run
