"""Config-driven pipeline orchestration.

`run_pipeline` executes the post-processing ladder in a fixed order -
raw distances, L2 normalization, camera mean subtraction, neighbor
smoothing, camera-distance subtraction, topology weighting, re-ranking,
model fusion - evaluating after every enabled stage so the output mirrors
a cumulative ablation table. Each stage writes its query x gallery
distance bundle and eval report under out/stages/<NN_name>/; disabled
stages are skipped without renumbering, so a run with a prefix of the
stages enabled produces bit-identical artifacts for that prefix.

`run_cluster_stage` produces two-stage pseudo-labels for a target-domain
training bundle: (re-ranked) self distances -> DBSCAN -> keep the largest
clusters -> promote isolated outliers to negatives-only singletons.
"""

import json
import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import camera, metrics, pseudo, rerank, report, store

logger = logging.getLogger(__name__)

STAGE_ORDER = (
    "00_raw",
    "01_l2norm",
    "02_cam_mean",
    "03_smooth",
    "04_cam_dist",
    "05_topology",
    "06_rerank",
    "07_fusion",
)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent pipeline configuration."""


class StageError(RuntimeError):
    """Raised when a pipeline stage fails; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__("stage %s failed: %s" % (stage, cause))
        self.stage = stage
        self.cause = cause


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError("unknown key(s) %s in %s" % (", ".join(map(repr, unknown)), where))


@dataclass(frozen=True)
class RerankStageConfig:
    enabled: bool = False
    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def params(self) -> rerank.RerankParams:
        return rerank.RerankParams(k1=self.k1, k2=self.k2, lam=self.lam)


@dataclass(frozen=True)
class FusionStageConfig:
    weights: tuple = ()
    normalize: str = "none"


@dataclass(frozen=True)
class ClusterStageConfig:
    train_bundle: str
    distance: str = "rerank"
    eps: float = 0.6
    min_samples: int = 4
    top: int = 500
    singletons: int = 200
    include_discarded: bool = False
    recluster_every_epochs: int = 6
    k1: int = 20
    k2: int = 6
    lam: float = 0.3


@dataclass(frozen=True)
class PipelineConfig:
    test_bundle: str
    extra_model_bundles: tuple = ()
    camera_distance_bundles: tuple = ()
    validation_bundle: str = ""
    out_dir: str = ""
    seed: int = 0
    metric: str = "euclidean"
    l2_normalize: bool = False
    camera_mean: bool = False
    neighbor_k: int = 0
    cam_dist_rate: float = 0.0
    topology_alpha: float = 0.0
    rerank: RerankStageConfig = field(default_factory=RerankStageConfig)
    fusion: FusionStageConfig = field(default_factory=FusionStageConfig)
    cluster: ClusterStageConfig = None

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        allowed = {
            "test_bundle", "extra_model_bundles", "camera_distance_bundles",
            "validation_bundle", "out_dir", "seed", "metric", "l2_normalize",
            "camera_mean", "neighbor_k", "cam_dist_rate", "topology_alpha",
            "rerank", "fusion", "cluster",
        }
        _check_keys(raw, allowed, "pipeline config")
        if "test_bundle" not in raw:
            raise ConfigError("pipeline config needs a test_bundle")

        rr_raw = dict(raw.get("rerank", {}))
        _check_keys(rr_raw, {"enabled", "k1", "k2", "lambda"}, "rerank section")
        if "lambda" in rr_raw:
            rr_raw["lam"] = float(rr_raw.pop("lambda"))
        rr = RerankStageConfig(**rr_raw)

        fu_raw = dict(raw.get("fusion", {}))
        _check_keys(fu_raw, {"weights", "normalize"}, "fusion section")
        fu = FusionStageConfig(
            weights=tuple(float(w) for w in fu_raw.get("weights", ())),
            normalize=fu_raw.get("normalize", "none"),
        )

        cl = None
        if raw.get("cluster") is not None:
            cl_raw = dict(raw["cluster"])
            _check_keys(
                cl_raw,
                {"train_bundle", "distance", "eps", "min_samples", "top", "singletons",
                 "include_discarded", "recluster_every_epochs", "k1", "k2", "lambda"},
                "cluster section",
            )
            if "train_bundle" not in cl_raw:
                raise ConfigError("cluster section needs a train_bundle")
            if "lambda" in cl_raw:
                cl_raw["lam"] = float(cl_raw.pop("lambda"))
            cl = ClusterStageConfig(**cl_raw)

        cfg = cls(
            test_bundle=raw["test_bundle"],
            extra_model_bundles=tuple(raw.get("extra_model_bundles", ())),
            camera_distance_bundles=tuple(raw.get("camera_distance_bundles", ())),
            validation_bundle=raw.get("validation_bundle", ""),
            out_dir=raw.get("out_dir", ""),
            seed=int(raw.get("seed", 0)),
            metric=raw.get("metric", "euclidean"),
            l2_normalize=bool(raw.get("l2_normalize", False)),
            camera_mean=bool(raw.get("camera_mean", False)),
            neighbor_k=int(raw.get("neighbor_k", 0)),
            cam_dist_rate=float(raw.get("cam_dist_rate", 0.0)),
            topology_alpha=float(raw.get("topology_alpha", 0.0)),
            rerank=rr,
            fusion=fu,
            cluster=cl,
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path: str) -> "PipelineConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def validate(self) -> None:
        if self.metric not in metrics.METRICS:
            raise ConfigError("unknown metric %r" % (self.metric,))
        if self.neighbor_k < 0:
            raise ConfigError("neighbor_k must be >= 0")
        if self.cam_dist_rate < 0:
            raise ConfigError("cam_dist_rate must be >= 0")
        for path in self._input_paths():
            if not os.path.isdir(path):
                raise ConfigError("input path does not exist: %s" % path)
        if self.rerank.enabled:
            self.rerank.params()
        if self.cam_dist_rate > 0 and not self.camera_distance_bundles:
            raise ConfigError("cam_dist_rate > 0 needs camera_distance_bundles")
        if self.topology_alpha != 0 and not self.validation_bundle:
            raise ConfigError("topology_alpha != 0 needs a validation_bundle")
        if self.extra_model_bundles:
            n_models = 1 + len(self.extra_model_bundles)
            if self.fusion.weights and len(self.fusion.weights) != n_models:
                raise ConfigError(
                    "fusion needs %d weights (one per model), got %d"
                    % (n_models, len(self.fusion.weights))
                )

    def _input_paths(self):
        paths = [self.test_bundle]
        paths += list(self.extra_model_bundles)
        paths += list(self.camera_distance_bundles)
        if self.validation_bundle:
            paths.append(self.validation_bundle)
        if self.cluster is not None:
            paths.append(self.cluster.train_bundle)
        return paths


def _submatrix(dm: store.DistanceMatrix, row_ids: np.ndarray, col_ids: np.ndarray) -> store.DistanceMatrix:
    """Reindex a distance matrix onto the given id lists."""
    row_pos = {int(r): i for i, r in enumerate(dm.row_ids)}
    col_pos = {int(c): i for i, c in enumerate(dm.col_ids)}
    try:
        rows = np.asarray([row_pos[int(r)] for r in row_ids], dtype=np.int64)
        cols = np.asarray([col_pos[int(c)] for c in col_ids], dtype=np.int64)
    except KeyError as exc:
        raise ValueError("distance bundle is missing sample id %s" % exc) from exc
    return store.DistanceMatrix(dm.values[np.ix_(rows, cols)], row_ids, col_ids)


class _ModelState:
    """Per-model feature state while walking the pipeline stages."""

    def __init__(self, bundle_path: str):
        self.bundle_path = bundle_path
        es = store.load_bundle(bundle_path)
        self.query = store.select_split(es, "query")
        self.gallery = store.select_split(es, "gallery")
        if self.query.n == 0 or self.gallery.n == 0:
            raise ValueError("bundle %s needs non-empty query and gallery splits" % bundle_path)

    def apply(self, fn) -> None:
        self.query = fn(self.query)
        self.gallery = fn(self.gallery)

    def qg_distance(self, metric: str) -> store.DistanceMatrix:
        return metrics.pairwise_distance(self.query, self.gallery, metric)

    def union_values(self, metric: str) -> np.ndarray:
        union = store.EmbeddingSet(
            np.vstack([self.query.features, self.gallery.features]),
            list(self.query.meta) + list(self.gallery.meta),
        )
        return metrics.pairwise_distance(union, union, metric).values.astype(np.float64)


def run_pipeline(cfg: PipelineConfig, out_dir: str = "") -> metrics.EvalReport:
    """Execute the enabled stages, writing artifacts under `out_dir`.

    Returns the final stage's report. On stage failure, everything written
    so far moves under out/failed/ and a StageError propagates.
    """
    out = out_dir or cfg.out_dir
    if not out:
        raise ConfigError("no output directory given (config out_dir or --out)")
    os.makedirs(out, exist_ok=True)
    stage_dir = os.path.join(out, "stages")
    try:
        stage_reports = _run_stages(cfg, stage_dir)
    except Exception as exc:
        failed = os.path.join(out, "failed")
        os.makedirs(failed, exist_ok=True)
        if os.path.isdir(stage_dir):
            shutil.move(stage_dir, os.path.join(failed, "stages"))
        if isinstance(exc, StageError):
            raise
        raise StageError("setup", exc) from exc

    final_name, final_report = stage_reports[-1]
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as f:
        f.write(final_report.to_json())
        f.write("\n")
    report.write_summary_csv(os.path.join(out, "summary.csv"), stage_reports)
    report.render_figures(stage_reports, os.path.join(out, "figures"))
    with open(os.path.join(out, "run_meta.json"), "w", encoding="utf-8") as f:
        json.dump({"seed": cfg.seed, "metric": cfg.metric, "final_stage": final_name}, f, indent=2)
        f.write("\n")
    logger.info("pipeline finished at stage %s: mAP=%.4f", final_name, final_report.map)
    return final_report


def _run_stages(cfg: PipelineConfig, stage_dir: str):
    primary = _ModelState(cfg.test_bundle)
    extras = []
    for path in cfg.extra_model_bundles:
        state = _ModelState(path)
        if not np.array_equal(state.query.indices, primary.query.indices) or not np.array_equal(
            state.gallery.indices, primary.gallery.indices
        ):
            raise StageError("07_fusion", ValueError(
                "extra model bundle %s does not cover the same samples as the test bundle" % path
            ))
        extras.append(state)
    models = [primary] + extras

    query, gallery = primary.query, primary.gallery
    union_ids = np.concatenate([query.indices, gallery.indices])
    union_cams = np.concatenate([query.camids, gallery.camids])

    stage_reports = []
    current = None  # latest staged query x gallery matrix

    def emit(name: str, dm: store.DistanceMatrix):
        nonlocal current
        rep = metrics.evaluate_sets(dm, query, gallery)
        d = os.path.join(stage_dir, name)
        store.save_distance(dm, d)
        with open(os.path.join(d, "report.json"), "w", encoding="utf-8") as f:
            f.write(rep.to_json())
            f.write("\n")
        stage_reports.append((name, rep))
        current = dm

    def run_stage(name, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    run_stage("00_raw", lambda: emit("00_raw", primary.qg_distance(cfg.metric)))

    if cfg.l2_normalize:
        def do_l2():
            for m in models:
                m.apply(metrics.l2_normalize)
            emit("01_l2norm", primary.qg_distance(cfg.metric))
        run_stage("01_l2norm", do_l2)

    if cfg.camera_mean:
        def do_mean():
            for m in models:
                _subtract_joint_camera_mean(m)
            emit("02_cam_mean", primary.qg_distance(cfg.metric))
        run_stage("02_cam_mean", do_mean)

    if cfg.neighbor_k > 0:
        def do_smooth():
            for m in models:
                _smooth_jointly(m, cfg.neighbor_k)
            emit("03_smooth", primary.qg_distance(cfg.metric))
        run_stage("03_smooth", do_smooth)

    cam_union = None
    if cfg.cam_dist_rate > 0:
        def do_cam_dist():
            nonlocal cam_union
            mats = [store.load_distance(p) for p in cfg.camera_distance_bundles]
            mats = [_submatrix(m, union_ids, union_ids) for m in mats]
            cam_union = camera.mean_camera_distance(mats)
            qg_cam = store.DistanceMatrix(
                cam_union.values[: query.n, query.n:], query.indices, gallery.indices
            )
            emit("04_cam_dist", camera.subtract_camera_distance(current, qg_cam, cfg.cam_dist_rate))
        run_stage("04_cam_dist", do_cam_dist)

    topo = None
    if cfg.topology_alpha != 0:
        def do_topology():
            nonlocal topo
            val = store.load_bundle(cfg.validation_bundle)
            val = store.select_split(val, "val")
            topo = camera.build_topology(val.pids, val.camids)
            emit("05_topology", camera.apply_topology(
                current, topo, query.camids, gallery.camids, cfg.topology_alpha
            ))
        run_stage("05_topology", do_topology)

    def finalize_model(m: _ModelState) -> store.DistanceMatrix:
        """Model's final q x g matrix: cam/topology fixes, then re-ranking.

        The re-ranked path works on the union self matrix with the same
        per-entry formulas applied blockwise (topology with a non-symmetric
        co-occurrence map can leave the union asymmetric; it is consumed
        row-wise and never serialized).
        """
        if not cfg.rerank.enabled:
            if m is primary:
                return current
            qg = m.qg_distance(cfg.metric)
            if cam_union is not None:
                qg_cam = store.DistanceMatrix(
                    cam_union.values[: query.n, query.n:], query.indices, gallery.indices
                )
                qg = camera.subtract_camera_distance(qg, qg_cam, cfg.cam_dist_rate)
            if topo is not None:
                qg = camera.apply_topology(qg, topo, query.camids, gallery.camids, cfg.topology_alpha)
            return qg
        union = m.union_values(cfg.metric)
        if cam_union is not None:
            union = np.maximum(
                union - cfg.cam_dist_rate * cam_union.values.astype(np.float64), 0.0
            )
        if topo is not None:
            factor = 1.0 + cfg.topology_alpha * topo.prob[union_cams[:, None], union_cams[None, :]]
            union = np.maximum(union * factor, 0.0)
        values = rerank.rerank_values(union, query.n, cfg.rerank.k1, cfg.rerank.k2, cfg.rerank.lam)
        return store.DistanceMatrix(values.astype(np.float32), query.indices, gallery.indices)

    if cfg.rerank.enabled:
        run_stage("06_rerank", lambda: emit("06_rerank", finalize_model(primary)))
    if extras:
        def do_fusion():
            finals = [current] + [finalize_model(m) for m in extras]
            weights = cfg.fusion.weights or tuple(1.0 for _ in finals)
            spec = metrics.FusionSpec(weights=weights, normalize=cfg.fusion.normalize)
            emit("07_fusion", metrics.fuse_distances(finals, spec))
        run_stage("07_fusion", do_fusion)

    return stage_reports


def _subtract_joint_camera_mean(m: _ModelState) -> None:
    """Camera means over query+gallery jointly, then split back."""
    union = store.EmbeddingSet(
        np.vstack([m.query.features, m.gallery.features]),
        list(m.query.meta) + list(m.gallery.meta),
    )
    fixed = camera.subtract_camera_mean(union)
    m.query = m.query.with_features(fixed.features[: m.query.n])
    m.gallery = m.gallery.with_features(fixed.features[m.query.n:])


def _smooth_jointly(m: _ModelState, k: int) -> None:
    union = store.EmbeddingSet(
        np.vstack([m.query.features, m.gallery.features]),
        list(m.query.meta) + list(m.gallery.meta),
    )
    fixed = camera.neighbor_smooth(union, k)
    m.query = m.query.with_features(fixed.features[: m.query.n])
    m.gallery = m.gallery.with_features(fixed.features[m.query.n:])


def run_cluster_stage(cfg: PipelineConfig, out_dir: str = ""):
    """Produce pseudo-label files for the configured target training bundle.

    Writes labels.csv (index, class, negatives_only) plus cluster.meta.json
    with the clustering parameters and the re-clustering cadence for
    external trainers. Returns the PseudoLabeling.
    """
    if cfg.cluster is None:
        raise ConfigError("config has no cluster section")
    out = out_dir or cfg.out_dir
    if not out:
        raise ConfigError("no output directory given (config out_dir or --out)")
    ccfg = cfg.cluster

    es = store.load_bundle(ccfg.train_bundle)
    rows = np.nonzero((es.splits == "train") & (es.domains == "target"))[0]
    if rows.size == 0:
        raise ValueError("bundle %s has no target-domain train rows" % ccfg.train_bundle)
    train = es.take(rows)

    base_dist = metrics.pairwise_distance(train, train, "euclidean")
    if ccfg.distance == "rerank":
        values = rerank.rerank_self(base_dist.values, ccfg.k1, ccfg.k2, ccfg.lam)
        dist = store.DistanceMatrix(values.astype(np.float32), train.indices, train.indices)
    elif ccfg.distance == "euclidean":
        dist = base_dist
    else:
        raise ConfigError("unknown cluster distance %r" % (ccfg.distance,))

    labels = pseudo.dbscan(dist, pseudo.DbscanParams(eps=ccfg.eps, min_samples=ccfg.min_samples))
    labeling = pseudo.select_top_classes(labels, ccfg.top)
    labeling = pseudo.add_singletons(
        labeling, labels, dist, ccfg.singletons, include_discarded=ccfg.include_discarded
    )

    os.makedirs(out, exist_ok=True)
    pseudo.save_labels_csv(os.path.join(out, "labels.csv"), train.indices, labeling)
    meta = {
        "n_samples": int(train.n),
        "n_classes": int(labeling.n_classes),
        "n_negatives_only": int(labeling.negatives_only.sum()),
        "n_outliers": int((labels == pseudo.OUTLIER).sum()),
        "distance": ccfg.distance,
        "eps": ccfg.eps,
        "min_samples": ccfg.min_samples,
        "top": ccfg.top,
        "singletons": ccfg.singletons,
        "recluster_every_epochs": ccfg.recluster_every_epochs,
    }
    with open(os.path.join(out, "cluster.meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    return labeling
