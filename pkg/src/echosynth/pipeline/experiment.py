"""End-to-end study: phantoms -> GAN -> synthesis -> post-processing -> datasets -> segmentation -> tables.

Every artifact lands under ``cfg.out_dir`` and is a pure function of the
config; rerunning with the same config rewrites byte-identical CSVs.

Output layout::

    phantoms/{role}_{i:03d}.json         phantom parameters
    labels/{role}_{i:03d}.v3d            label volumes
    images/{role}_{i:03d}.v3d            oracle renderings (gan, real, test roles)
    gan/checkpoint.eck, gan/history.csv
    synthetic/{variant}/syn_{i:03d}.v3d  GAN output, raw and post-processed
    datasets/{recipe}.json               manifests
    seg/{model}/folds.csv, best_fold.eck, test_scores.csv
    report/validation.{txt,csv}, report/test.{txt,csv}, report/folds.csv
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import gan3d, metrics, phantom, postproc, segmenter
from ..volume import STRUCTURES
from .datasets import RECIPES, SYNTHETIC_POOL, REAL_POOL, DatasetManifest, DatasetSources, build_dataset, model_name
from .io import ModelCheckpoint, load_volume, save_volume

SCHEMA_VERSION = 1
ROLE_SEED_BASE = {"gan": 0, "synthetic": 1000, "real": 2000, "test": 3000}
SEED_STRIDE = 10000
POSTPROC_VARIANTS = {"raw": (False, False), "wavelet": (True, False), "cone": (False, True),
                     "waveletcone": (True, True)}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage, self.cause = stage, cause


@dataclass
class ExperimentConfig:
    out_dir: str = "out"
    seed: int = 0
    dims: tuple = (32, 32, 16)
    gan_train_count: int = 8
    test_count: int = 6
    generator: dict = field(default_factory=lambda: asdict(gan3d.GeneratorConfig()))
    discriminator: dict = field(default_factory=lambda: asdict(gan3d.DiscriminatorConfig()))
    gan_train: dict = field(default_factory=lambda: {"epochs": 200, "lr": 2e-4, "lambda_l1": 100.0,
                                                     "batch_size": 4})
    wavelet: str = "sym4:1:hard"
    cone: str = "default"
    seg: dict = field(default_factory=lambda: asdict(segmenter.SegConfig()))
    recipes: list = field(default_factory=lambda: list(RECIPES))

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        unknown = [r for r in self.recipes if r not in RECIPES]
        if unknown:
            raise ValueError(f"unknown recipes {unknown}; valid names: {', '.join(RECIPES)}")
        if self.cone != "default":
            raise ValueError(f"cone must be 'default', got {self.cone!r}")
        postproc.WaveletSpec.parse(self.wavelet)
        self.generator_config(), self.discriminator_config(), self.gan_train_config(), self.seg_config()

    # typed views ----------------------------------------------------------
    def generator_config(self) -> gan3d.GeneratorConfig:
        return gan3d.GeneratorConfig(**self.generator)

    def discriminator_config(self) -> gan3d.DiscriminatorConfig:
        return gan3d.DiscriminatorConfig(**self.discriminator)

    def gan_train_config(self) -> gan3d.GanTrainConfig:
        return gan3d.GanTrainConfig(**{"seed": self.seed, **self.gan_train})

    def seg_config(self) -> segmenter.SegConfig:
        return segmenter.SegConfig(**{"seed": self.seed, **self.seg})

    def wavelet_spec(self) -> postproc.WaveletSpec:
        return postproc.WaveletSpec.parse(self.wavelet)

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def desk_config(out_dir: str = "out", seed: int = 0) -> ExperimentConfig:
    """Full seven-model study at 32x32x16 (hours on one CPU core)."""
    return ExperimentConfig(out_dir=out_dir, seed=seed)


def smoke_config(out_dir: str = "out", seed: int = 0) -> ExperimentConfig:
    """Same stages and dataset arithmetic with token training budgets (about a minute)."""
    return ExperimentConfig(
        out_dir=out_dir, seed=seed, gan_train_count=4,
        generator=asdict(gan3d.GeneratorConfig(base_channels=4)),
        discriminator=asdict(gan3d.DiscriminatorConfig(base_channels=4)),
        gan_train={"epochs": 2, "lr": 2e-4, "lambda_l1": 100.0, "batch_size": 4},
        seg=asdict(segmenter.SegConfig(epochs=1, levels=2, base_channels=2, batch_size=8)),
    )


@dataclass
class ReportBundle:
    out_dir: str
    manifests: dict
    folds: dict
    validation_rows: list
    test_rows: list
    validation_table: str
    test_table: str


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def role_count(cfg: ExperimentConfig, role: str) -> int:
    return {"gan": cfg.gan_train_count, "synthetic": SYNTHETIC_POOL, "real": REAL_POOL, "test": cfg.test_count}[role]


def phantom_seed(cfg: ExperimentConfig, role: str, i: int) -> int:
    # disjoint ranges per role, shifted as a block by the experiment seed
    return cfg.seed * SEED_STRIDE + ROLE_SEED_BASE[role] + i


def case_name(role: str, i: int) -> str:
    return f"{role}_{i:03d}"


def stage_phantoms(cfg: ExperimentConfig, out: Path) -> None:
    for role in ROLE_SEED_BASE:
        for i in range(role_count(cfg, role)):
            params = phantom.sample_phantom_params(phantom_seed(cfg, role, i))
            labels = phantom.generate_phantom_labels(params, cfg.dims)
            (out / "phantoms").mkdir(parents=True, exist_ok=True)
            (out / "labels").mkdir(parents=True, exist_ok=True)
            (out / "phantoms" / f"{case_name(role, i)}.json").write_text(
                json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")
            save_volume(labels, out / "labels" / f"{case_name(role, i)}.v3d")


def stage_render(cfg: ExperimentConfig, out: Path) -> None:
    (out / "images").mkdir(parents=True, exist_ok=True)
    for role in ("gan", "real", "test"):
        for i in range(role_count(cfg, role)):
            labels = load_volume(out / "labels" / f"{case_name(role, i)}.v3d")
            img = phantom.render_pseudo_ultrasound(labels, seed=phantom_seed(cfg, role, i))
            save_volume(img, out / "images" / f"{case_name(role, i)}.v3d")


def _role_pairs(out: Path, role: str, n: int) -> list:
    return [(load_volume(out / "images" / f"{case_name(role, i)}.v3d"),
             load_volume(out / "labels" / f"{case_name(role, i)}.v3d")) for i in range(n)]


def stage_train_gan(cfg: ExperimentConfig, out: Path) -> ModelCheckpoint:
    (out / "gan").mkdir(parents=True, exist_ok=True)
    ckpt, history = gan3d.train_gan(_role_pairs(out, "gan", cfg.gan_train_count), cfg.generator_config(),
                                    cfg.discriminator_config(), cfg.gan_train_config())
    ckpt.save(out / "gan" / "checkpoint.eck")
    gan3d.save_history(history, out / "gan" / "history.csv")
    return ckpt


def postprocess_volume(vol, wavelet: postproc.WaveletSpec | None, cone: bool):
    if wavelet is not None:
        vol = postproc.wavelet_denoise(vol, wavelet)
    if cone:
        mask = postproc.make_cone_mask(vol.dims, vol.spacing, postproc.ConeSpec.default(vol.dims, vol.spacing))
        vol = postproc.apply_cone(vol, mask)
    return vol


def stage_synth(cfg: ExperimentConfig, out: Path) -> None:
    G = gan3d.load_generator(ModelCheckpoint.load(out / "gan" / "checkpoint.eck"))
    spec = cfg.wavelet_spec()
    for variant in POSTPROC_VARIANTS:
        (out / "synthetic" / variant).mkdir(parents=True, exist_ok=True)
    for i in range(SYNTHETIC_POOL):
        labels = load_volume(out / "labels" / f"{case_name('synthetic', i)}.v3d")
        raw = gan3d.synthesize(G, labels)
        for variant, (wav, cone) in POSTPROC_VARIANTS.items():
            vol = postprocess_volume(raw, spec if wav else None, cone)
            save_volume(vol, out / "synthetic" / variant / f"syn_{i:03d}.v3d")


def dataset_sources() -> DatasetSources:
    """Paths relative to the ``datasets/`` directory that holds the manifests."""
    return DatasetSources(
        synthetic={v: [f"../synthetic/{v}/syn_{i:03d}.v3d" for i in range(SYNTHETIC_POOL)] for v in POSTPROC_VARIANTS},
        synthetic_labels=[f"../labels/{case_name('synthetic', i)}.v3d" for i in range(SYNTHETIC_POOL)],
        real=[(f"../images/{case_name('real', i)}.v3d", f"../labels/{case_name('real', i)}.v3d")
              for i in range(REAL_POOL)],
    )


def stage_datasets(cfg: ExperimentConfig, out: Path) -> dict:
    (out / "datasets").mkdir(parents=True, exist_ok=True)
    manifests = {}
    for recipe in cfg.recipes:
        m = build_dataset(recipe, dataset_sources(), cfg.seed, cfg.hash())
        path = out / "datasets" / f"{recipe}.json"
        m.save(path)
        manifests[recipe] = DatasetManifest.load(path)
        manifests[recipe].validate()
    return manifests


def stage_train_seg(cfg: ExperimentConfig, out: Path, manifests: dict) -> dict:
    folds = {}
    for recipe, m in manifests.items():
        name = model_name(recipe)
        d = out / "seg" / name
        d.mkdir(parents=True, exist_ok=True)
        results = segmenter.train_seg(m, cfg.seg_config())
        (d / "folds.csv").write_text(segmenter.folds_csv(name, results))
        segmenter.best_fold(results).checkpoint.save(d / "best_fold.eck")
        folds[name] = results
    return folds


def stage_evaluate(cfg: ExperimentConfig, out: Path, models) -> dict:
    test = _role_pairs(out, "test", cfg.test_count)
    scores = {}
    for name in models:
        ckpt = ModelCheckpoint.load(out / "seg" / name / "best_fold.eck")
        model = segmenter.load_model(ckpt)
        scores[name] = [metrics.score_case(segmenter.predict(model, img), lab, case_name("test", i))
                        for i, (img, lab) in enumerate(test)]
        (out / "seg" / name / "test_scores.csv").write_text(metrics.scores_csv(name, scores[name]))
    return scores


def validation_rows(folds: dict) -> list:
    return [metrics.AggregateRow.from_scores(name, s, [r.dice[s] for r in results])
            for s in STRUCTURES for name, results in folds.items()]


def test_rows(scores: dict) -> list:
    rows = [metrics.AggregateRow.from_scores(name, s, [c.dice[s] for c in cases])
            for s in STRUCTURES for name, cases in scores.items()]
    rows += [metrics.AggregateRow.from_scores(name, metrics.HEART_VOLUME, [c.vs for c in cases], metric="vs")
             for name, cases in scores.items()]
    return rows


def stage_report(out: Path, folds: dict, scores: dict) -> tuple:
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    vrows, trows = validation_rows(folds), test_rows(scores)
    vtab, ttab = metrics.report_tables(vrows, "validation"), metrics.report_tables(trows, "test")
    (rdir / "validation.txt").write_text(vtab)
    (rdir / "validation.csv").write_text(metrics.rows_csv(vrows))
    (rdir / "test.txt").write_text(ttab)
    (rdir / "test.csv").write_text(metrics.rows_csv(trows))
    fold_csv = "".join(segmenter.folds_csv(name, r).split("\n", 1)[1] if k else segmenter.folds_csv(name, r)
                       for k, (name, r) in enumerate(folds.items()))
    (rdir / "folds.csv").write_text(fold_csv)
    return vrows, trows, vtab, ttab


def run_experiment(cfg: ExperimentConfig, log=None) -> ReportBundle:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    say = log if log is not None else (lambda msg: None)
    state = {}

    def stage(name, fn):
        say(f"[{name}]")
        try:
            return fn()
        except Exception as exc:  # partial outputs stay on disk
            raise StageError(name, exc) from exc

    stage("phantoms", lambda: stage_phantoms(cfg, out))
    stage("render", lambda: stage_render(cfg, out))
    if any(RECIPES[r].synthetic for r in cfg.recipes):
        stage("train-gan", lambda: stage_train_gan(cfg, out))
        stage("synth", lambda: stage_synth(cfg, out))
    state["manifests"] = stage("build-dataset", lambda: stage_datasets(cfg, out))
    state["folds"] = stage("train-seg", lambda: stage_train_seg(cfg, out, state["manifests"]))
    state["scores"] = stage("evaluate", lambda: stage_evaluate(cfg, out, list(state["folds"])))
    vrows, trows, vtab, ttab = stage("report", lambda: stage_report(out, state["folds"], state["scores"]))
    return ReportBundle(str(out), state["manifests"], state["folds"], vrows, trows, vtab, ttab)
