"""Command-line interface.

Heavy modules are imported inside the command bodies so the group callback
can cap BLAS worker pools through the environment before numpy loads.
"""

import logging
import os
import sys

import click


def _cap_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


@click.group()
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Cap numeric worker threads (results are unaffected).")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(threads, verbose):
    """Embedding-space toolkit for domain-adaptive person re-identification."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if threads is not None:
        if "numpy" in sys.modules:
            logging.getLogger(__name__).debug("numpy already loaded; thread cap applies to new pools only")
        _cap_threads(threads)


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Bundle output directory.")
@click.option("--n-ids", type=int, required=True)
@click.option("--samples-per-id", type=int, required=True)
@click.option("--dim", type=int, default=512, show_default=True)
@click.option("--n-cameras", type=int, default=6, show_default=True)
@click.option("--intra-sigma", type=float, default=0.0, show_default=True)
@click.option("--camera-offset", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--domain", type=click.Choice(["source", "target"]), default="target", show_default=True)
@click.option("--split-plan", type=click.Choice(["eval", "train"]), default="eval", show_default=True)
def synth(out, n_ids, samples_per_id, dim, n_cameras, intra_sigma, camera_offset, seed, domain, split_plan):
    """Generate a seeded synthetic embedding bundle."""
    from . import store

    cfg = store.SynthConfig(
        n_ids=n_ids, samples_per_id=samples_per_id, dim=dim, n_cameras=n_cameras,
        intra_sigma=intra_sigma, camera_offset=camera_offset, seed=seed,
    )
    es = store.generate_synthetic(cfg, domain=domain, split_plan=split_plan)
    store.save_bundle(es, out)
    click.echo("wrote %d x %d bundle to %s" % (es.n, es.dim, out))


@main.command(name="eval")
@click.option("--bundle", required=True, type=click.Path(exists=True),
              help="Embedding bundle with query/gallery splits.")
@click.option("--dist", type=click.Path(exists=True), default=None,
              help="Evaluate this distance bundle instead of computing distances.")
@click.option("--metric", type=click.Choice(["euclidean", "cosine"]), default="euclidean", show_default=True)
@click.option("--l2-normalize", is_flag=True, help="L2-normalize features before distances.")
@click.option("--out", type=click.Path(), default=None, help="Write report/dist/figures here.")
def eval_cmd(bundle, dist, metric, l2_normalize, out):
    """Evaluate retrieval quality (mAP / CMC) of a bundle."""
    from . import metrics, report, store

    es = store.load_bundle(bundle)
    query = store.select_split(es, "query")
    gallery = store.select_split(es, "gallery")
    if dist is not None:
        dm = store.load_distance(dist)
    else:
        if l2_normalize:
            query = metrics.l2_normalize(query)
            gallery = metrics.l2_normalize(gallery)
        dm = metrics.pairwise_distance(query, gallery, metric)
    rep = metrics.evaluate_sets(dm, query, gallery)
    click.echo("mAP    %.4f" % rep.map)
    for k in (1, 5, 10):
        click.echo("Rank-%-2d %.4f" % (k, rep.rank(k)))
    if rep.excluded_queries:
        click.echo("excluded queries: %d" % len(rep.excluded_queries))
    if out:
        os.makedirs(out, exist_ok=True)
        store.save_distance(dm, os.path.join(out, "dist"))
        with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as f:
            f.write(rep.to_json())
            f.write("\n")
        report.render_cmc_csv(os.path.join(out, "cmc.csv"), rep)
        report.render_figures([("eval", rep)], os.path.join(out, "figures"))
        click.echo("wrote report to %s" % out)


@main.command()
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--cam-mean/--no-cam-mean", default=True, show_default=True,
              help="Subtract per-camera feature means.")
@click.option("--neighbor-k", type=int, default=0, show_default=True,
              help="Smooth each feature with its k nearest neighbors (0 = off).")
@click.option("--cam-dist", default=None,
              help="Comma-separated camera distance bundles (query x gallery).")
@click.option("--cam-rate", type=float, default=0.0, show_default=True)
@click.option("--topology", type=click.Path(exists=True), default=None,
              help="Labeled validation bundle for the camera topology.")
@click.option("--alpha", type=float, default=0.0, show_default=True)
@click.option("--metric", type=click.Choice(["euclidean", "cosine"]), default="euclidean", show_default=True)
def camfix(bundle, out, cam_mean, neighbor_k, cam_dist, cam_rate, topology, alpha, metric):
    """Apply camera-bias fixes; write the fixed bundle (and distances)."""
    from . import camera, metrics, store

    es = store.load_bundle(bundle)
    if cam_mean:
        es = camera.subtract_camera_mean(es)
    if neighbor_k > 0:
        es = camera.neighbor_smooth(es, neighbor_k)
    store.save_bundle(es, out)
    click.echo("wrote fixed bundle to %s" % out)

    if cam_dist or topology:
        query = store.select_split(es, "query")
        gallery = store.select_split(es, "gallery")
        dm = metrics.pairwise_distance(query, gallery, metric)
        if cam_dist:
            mats = [store.load_distance(p) for p in cam_dist.split(",")]
            from .pipeline import _submatrix

            mats = [_submatrix(m, dm.row_ids, dm.col_ids) for m in mats]
            dm = camera.subtract_camera_distance(dm, camera.mean_camera_distance(mats), cam_rate)
        if topology:
            val = store.select_split(store.load_bundle(topology), "val")
            topo = camera.build_topology(val.pids, val.camids)
            dm = camera.apply_topology(dm, topo, query.camids, gallery.camids, alpha)
        store.save_distance(dm, os.path.join(out, "dist"))
        click.echo("wrote fixed distance bundle to %s" % os.path.join(out, "dist"))


@main.command(name="rerank")
@click.option("--dist", required=True, type=click.Path(exists=True),
              help="Self-distance bundle over query+gallery (queries first).")
@click.option("--n-query", type=int, required=True)
@click.option("--k1", type=int, default=20, show_default=True)
@click.option("--k2", type=int, default=6, show_default=True)
@click.option("--lambda", "lam", type=float, default=0.3, show_default=True)
@click.option("--out", required=True, type=click.Path())
def rerank_cmd(dist, n_query, k1, k2, lam, out):
    """k-reciprocal re-ranking of a distance bundle."""
    from . import rerank, store

    dm = store.load_distance(dist)
    result = rerank.rerank(dm, n_query, rerank.RerankParams(k1=k1, k2=k2, lam=lam))
    store.save_distance(result, out)
    click.echo("wrote re-ranked %d x %d matrix to %s" % (result.shape + (out,)))


@main.command()
@click.option("--dist", required=True, type=click.Path(exists=True),
              help="Self-distance bundle over the samples to cluster.")
@click.option("--eps", type=float, default=0.6, show_default=True)
@click.option("--min-samples", type=int, default=4, show_default=True)
@click.option("--top", type=int, default=500, show_default=True)
@click.option("--singletons", type=int, default=200, show_default=True)
@click.option("--include-discarded", is_flag=True,
              help="Draw singletons from discarded clusters too, not only outliers.")
@click.option("--out", required=True, type=click.Path(), help="Output labels.csv path.")
def cluster(dist, eps, min_samples, top, singletons, include_discarded, out):
    """Two-stage pseudo-labels: DBSCAN, keep top classes, add singletons."""
    from . import pseudo, store

    dm = store.load_distance(dist)
    labels = pseudo.dbscan(dm, pseudo.DbscanParams(eps=eps, min_samples=min_samples))
    labeling = pseudo.select_top_classes(labels, top)
    labeling = pseudo.add_singletons(labeling, labels, dm, singletons, include_discarded=include_discarded)
    pseudo.save_labels_csv(out, dm.row_ids, labeling)
    click.echo(
        "wrote %d classes (%d negatives-only) over %d samples to %s"
        % (labeling.n_classes, int(labeling.negatives_only.sum()), len(labels), out)
    )


@main.command()
@click.option("--input", "inputs", multiple=True, required=True,
              help="Distance bundle (repeat per model).")
@click.option("--weights", default=None, help="Comma-separated weights, one per input.")
@click.option("--normalize", type=click.Choice(["none", "minmax"]), default="none", show_default=True)
@click.option("--out", required=True, type=click.Path())
def fuse(inputs, weights, normalize, out):
    """Weighted fusion of distance bundles."""
    from . import metrics, store

    mats = [store.load_distance(p) for p in inputs]
    ws = tuple(float(w) for w in weights.split(",")) if weights else tuple(1.0 for _ in mats)
    fused = metrics.fuse_distances(mats, metrics.FusionSpec(weights=ws, normalize=normalize))
    store.save_distance(fused, out)
    click.echo("wrote fused matrix to %s" % out)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Overrides out_dir from the config.")
def run(config_path, out):
    """Run the full post-processing pipeline from a JSON config."""
    from . import pipeline

    cfg = pipeline.PipelineConfig.from_json_file(config_path)
    try:
        rep = pipeline.run_pipeline(cfg, out_dir=out or "")
        if cfg.cluster is not None:
            pipeline.run_cluster_stage(cfg, out_dir=os.path.join(out or cfg.out_dir, "cluster"))
    except pipeline.StageError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo("final mAP %.4f  Rank-1 %.4f" % (rep.map, rep.rank(1)))


@main.group()
def losses():
    """Training-loss numerics."""


@losses.command()
def selftest():
    """Check the loss operations against their analytic values."""
    import math

    from . import trainmath

    checks = [
        ("label_smooth_ce uniform logits = ln 4",
         trainmath.label_smooth_ce([1.0, 1.0, 1.0, 1.0], 0, 0.1, 4), math.log(4.0), 1e-9),
        ("label_smooth_ce eps=0 spiked logits ~ 0",
         trainmath.label_smooth_ce([1000.0, 0.0, 0.0, 0.0], 0, 0.0, 4), 0.0, 1e-6),
        ("soft_margin_triplet(d, d) = ln 2",
         trainmath.soft_margin_triplet(1.5, 1.5), math.log(2.0), 1e-12),
        ("soft_margin_triplet(0, 20) = ln(1 + e^-20)",
         trainmath.soft_margin_triplet(0.0, 20.0), math.log1p(math.exp(-20.0)), 1e-12),
        ("soft_margin_triplet(50, 0) ~ 50",
         trainmath.soft_margin_triplet(50.0, 0.0), 50.0, 1e-6),
        ("soft_margin_triplet(500, 0) overflow-safe",
         trainmath.soft_margin_triplet(500.0, 0.0), 500.0, 1e-6),
    ]
    failed = 0
    for name, got, want, tol in checks:
        ok = abs(got - want) <= tol
        failed += 0 if ok else 1
        click.echo("[%s] %s: got %.12g want %.12g" % ("PASS" if ok else "FAIL", name, got, want))
    if failed:
        raise click.ClickException("%d loss check(s) failed" % failed)
    click.echo("all loss checks passed")


@main.command()
@click.option("--epoch", type=int, required=True)
@click.option("--base-lr", type=float, default=0.02, show_default=True)
@click.option("--warmup-epochs", type=int, default=10, show_default=True)
@click.option("--decay-epochs", default="24,48", show_default=True)
@click.option("--decay-factor", type=float, default=0.1, show_default=True)
@click.option("--total-epochs", type=int, default=60, show_default=True)
def schedule(epoch, base_lr, warmup_epochs, decay_epochs, decay_factor, total_epochs):
    """Print the learning rate at an epoch (1-indexed)."""
    from . import trainmath

    s = trainmath.LrSchedule(
        base_lr=base_lr,
        warmup_epochs=warmup_epochs,
        decay_epochs=tuple(int(e) for e in decay_epochs.split(",") if e.strip()),
        decay_factor=decay_factor,
        total_epochs=total_epochs,
    )
    click.echo("%.6g" % trainmath.lr_at(epoch, s))


if __name__ == "__main__":
    main()
