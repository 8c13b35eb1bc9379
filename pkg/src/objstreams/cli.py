"""Command-line entry points: ``edge``, ``consume``, ``metrics`` and ``policy``.

Each command is a thin shell over the library or one of the HTTP services.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import yaml

from .scene import BoundingBox


def _csv_list(value: str | None) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def _fail(msg: str) -> None:
    raise click.ClickException(msg)


# ---------------------------------------------------------------------------
# edge


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log pipeline progress.")
def edge(verbose: bool) -> None:
    """Edge operator commands."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@edge.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--skip-n", type=int, help="Run the detector every n-th frame.")
@click.option("--iou-min", type=float, help="Minimum IoU for track association.")
@click.option("--max-age", type=int, help="Frames a track survives without a detection.")
@click.option("--output", type=click.Path(file_okay=False), help="Override the session directory.")
def edge_run(config_path, skip_n, iou_min, max_age, output):
    """Run one edge session and publish its segments and manifest."""
    from .pipeline import PipelineError, load_config, run_pipeline

    cfg = load_config(config_path)
    if skip_n is not None:
        cfg.skip_n = skip_n
    if iou_min is not None:
        cfg.iou_min = iou_min
    if max_age is not None:
        cfg.max_age = max_age
    if output:
        cfg.output = output
    try:
        report = run_pipeline(cfg)
    except (PipelineError, ValueError) as exc:
        _fail(str(exc))
    click.echo(report.to_json(), nl=False)


@edge.command("synth")
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def edge_synth(scene_path, out):
    """Render a scene spec to a frame directory plus truth.trace."""
    from .scene import generate_scene
    from .traceio import load_scene_spec, write_frame_dir, write_trace

    frames, truth = generate_scene(load_scene_spec(scene_path))
    write_frame_dir(frames, Path(out) / "frames")
    write_trace(truth, Path(out) / "truth.trace")
    click.echo(f"{len(frames)} frames written to {out}")


@edge.command("bandwidth")
@click.option("--session", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scheme", required=True, type=click.Choice(["composable", "naive-whitelist", "naive-blacklist"]))
@click.option("--consumers", type=click.Path(exists=True, dir_okay=False), help="YAML consumer list (default: the five smart-city apps).")
@click.option("--out", type=click.Path(dir_okay=False), help="Write JSON here and CSV next to it.")
def edge_bandwidth(session, scheme, consumers, out):
    """Edge bytes needed to serve a consumer set under one distribution scheme."""
    from .bandwidth import account_bandwidth, load_consumers, smart_city_consumers
    from .pipeline import load_session

    specs = load_consumers(consumers) if consumers else smart_city_consumers()
    report = account_bandwidth(load_session(session), scheme, specs)
    if out:
        Path(out).write_text(report.to_json())
        Path(out).with_suffix(".csv").write_text(report.to_csv())
    click.echo(report.to_json(), nl=False)


@edge.command("serve")
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--policy-url", required=True, help="Policy engine used to authorize reprocessing.")
def edge_serve(root, port, host, policy_url):
    """Serve a session under /session and accept POST /reprocess."""
    import uvicorn

    from .edge import create_edge_app
    from .policy.client import PolicyClient

    uvicorn.run(create_edge_app(root, PolicyClient(policy_url)), host=host, port=port)


# ---------------------------------------------------------------------------
# consume


def _parse_region(value: str | None) -> BoundingBox | None:
    if not value:
        return None
    parts = value.split(",")
    if len(parts) != 4:
        raise click.BadParameter("expected x0,y0,x1,y1")
    return BoundingBox(*(int(p) for p in parts))


@click.command()
@click.option("--manifest", required=True, help="Session directory, manifest.json path or http(s) URL.")
@click.option("--policy", "policy_url", required=True, help="Policy engine base URL.")
@click.option("--credential", required=True, envvar="OBJSTREAMS_CREDENTIAL")
@click.option("--classes", required=True, help="Comma-separated classes, e.g. car,background.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--fetch", type=click.Choice(["granted", "all"]), default="granted", show_default=True)
@click.option("--count-region", help="x0,y0,x1,y1 region for entry counting.")
@click.option("--warrants/--no-warrants", default=True, show_default=True, help="Also use retroactive grants.")
@click.option("--edge", "edge_url", help="Edge base URL, needed for --reprocess.")
@click.option("--reprocess", "reprocess_class", help="Ask the edge to re-analyse this class first.")
@click.option("--reprocess-frames", help="Comma-separated frame indices (default: whole session).")
def consume(manifest, policy_url, credential, classes, out, fetch, count_region, warrants, edge_url, reprocess_class, reprocess_frames):
    """Request keys, fetch and compose the granted streams, and count objects."""
    from .consumer import Keyring, sync_and_compose, write_outputs
    from .edge import ReprocessDenied, request_reprocess
    from .policy.client import AccessDenied, PolicyClient, PolicyRequestError

    region = _parse_region(count_region)
    client = PolicyClient(policy_url, credential)
    try:
        grant = client.request_streams(_csv_list(classes))
        extra = client.warrants() if warrants else []
    except AccessDenied as exc:
        _fail(f"denied: {', '.join(exc.offending)}")
    except PolicyRequestError as exc:
        _fail(str(exc))
    if reprocess_class:
        if not edge_url:
            _fail("--reprocess needs --edge")
        frames = [int(t) for t in _csv_list(reprocess_frames)] if reprocess_frames is not None else None
        try:
            ack = request_reprocess(edge_url, credential, reprocess_class, frames)
        except ReprocessDenied as exc:
            _fail(f"reprocess denied: {', '.join(exc.offending)}")
        click.echo(json.dumps(ack), err=True)
    result = sync_and_compose(manifest, Keyring([grant, *extra]), fetch=fetch, store_dir=Path(out) / "store")
    write_outputs(result, out, region)
    summary = {
        "frames": int(result.frames.shape[0]),
        "decoded": {k: len(v) for k, v in result.decoded.items()},
        "opaque_segments": result.opaque_segments,
        "skipped": [vars(i) for i in result.skipped],
        "gaps": [vars(i) for i in result.gaps],
    }
    click.echo(json.dumps(summary, indent=2))


# ---------------------------------------------------------------------------
# metrics


@click.group()
def metrics() -> None:
    """Detection-error accounting and privacy/utility losses."""


@metrics.command("tally")
@click.option("--truth", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--pred", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--iou", "iou_match", default=0.5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write the tally JSON here.")
def metrics_tally(truth, pred, iou_match, out):
    """Match a prediction trace against truth and print the confusion tally."""
    from .metrics import match_and_tally
    from .traceio import read_trace

    try:
        tally = match_and_tally(read_trace(truth), read_trace(pred), iou_match)
    except ValueError as exc:
        _fail(str(exc))
    _emit(json.dumps(tally.to_json(), indent=2) + "\n", out)


@metrics.command("losses")
@click.option("--tally", "tally_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--whitelist", default="", help="Comma-separated relevant classes.")
@click.option("--blacklist", default="", help="Comma-separated sensitive classes.")
@click.option("--scene", default="", help="Label for the scene column.")
@click.option("--detector", default="", help="Label for the detector column.")
@click.option("--out", type=click.Path(dir_okay=False))
def metrics_losses(tally_path, whitelist, blacklist, scene, detector, out):
    """Privacy and utility losses for one whitelist/blacklist pair (CSV)."""
    from .metrics import check_theorem1, compute_losses, emit_report, load_tally

    tally = load_tally(tally_path)
    wl, bl = _csv_list(whitelist), _csv_list(blacklist)
    try:
        report = compute_losses(tally, wl, bl)
    except KeyError as exc:
        _fail(f"unknown class {exc}")
    if report.overlap:
        click.echo(f"warning: classes on both lists: {', '.join(report.overlap)}", err=True)
    _emit(emit_report([(scene, detector, report)]), out)
    click.echo(f"theorem1: {check_theorem1(tally, wl, bl).status}", err=True)


@metrics.command("theorem1")
@click.option("--fuzz", "n_cases", default=10_000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--classes", "n_classes", default=4, show_default=True)
def metrics_theorem1(n_cases, seed, n_classes):
    """Fuzz the whitelisting guarantee on random tallies; exit 1 on a counterexample."""
    from .metrics import fuzz_theorem1

    result = fuzz_theorem1(n_cases, seed, n_classes)
    click.echo("cases,drawn,counterexamples")
    click.echo(f"{result.cases},{result.drawn},{len(result.counterexamples)}")
    if result.counterexamples:
        click.echo(json.dumps(result.counterexamples[0]), err=True)
        sys.exit(1)


# ---------------------------------------------------------------------------
# policy


@click.group()
@click.option("--url", default="http://127.0.0.1:8000", show_default=True, envvar="OBJSTREAMS_POLICY_URL")
@click.option("--admin-token", envvar="OBJSTREAMS_ADMIN_TOKEN")
@click.pass_context
def policy(ctx, url, admin_token) -> None:
    """Run the policy engine or administer a running one."""
    ctx.obj = {"url": url, "token": admin_token}


def _admin(ctx):
    from .policy.client import PolicyClient

    return PolicyClient(ctx.obj["url"], ctx.obj["token"])


def _call(fn, *args, **kwargs):
    from .policy.client import PolicyRequestError

    try:
        return fn(*args, **kwargs)
    except PolicyRequestError as exc:
        _fail(str(exc))


@policy.command("serve")
@click.option("--classes", required=True, help="Comma-separated class universe.")
@click.option("--profiles", type=click.Path(exists=True, dir_okay=False), help="YAML list of {id, mode, classes, credential}.")
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.pass_context
def policy_serve(ctx, classes, profiles, port, host):
    """Start the policy engine (in-memory state)."""
    import uvicorn

    from .policy.app import create_app
    from .policy.store import PolicyStore

    store = PolicyStore(_csv_list(classes), admin_token=ctx.obj["token"])
    if profiles:
        with open(profiles) as fh:
            for p in yaml.safe_load(fh) or []:
                store.upsert_profile(p["id"], p["mode"], p["classes"], p.get("credential"))
    if not ctx.obj["token"]:
        click.echo(f"admin token: {store.admin_token}", err=True)
    uvicorn.run(create_app(store), host=host, port=port)


@policy.command("put")
@click.argument("consumer_id")
@click.option("--mode", required=True, type=click.Choice(["whitelist", "blacklist"]))
@click.option("--classes", required=True)
@click.option("--credential")
@click.pass_context
def policy_put(ctx, consumer_id, mode, classes, credential):
    """Create or replace a consumer profile; prints it with its credential."""
    click.echo(json.dumps(_call(_admin(ctx).upsert_consumer, consumer_id, mode, _csv_list(classes), credential), indent=2))


@policy.command("delete")
@click.argument("consumer_id")
@click.pass_context
def policy_delete(ctx, consumer_id):
    _call(_admin(ctx).delete_consumer, consumer_id)


@policy.command("list")
@click.pass_context
def policy_list(ctx):
    click.echo(json.dumps(_call(_admin(ctx).list_consumers), indent=2))


@policy.command("rotate")
@click.option("--first-segment", type=int)
@click.pass_context
def policy_rotate(ctx, first_segment):
    click.echo(json.dumps(_call(_admin(ctx).rotate, first_segment), indent=2))


@policy.command("warrant")
@click.argument("consumer_id")
@click.option("--class", "class_name", required=True)
@click.option("--epochs", required=True, help="first:last, inclusive.")
@click.option("--reason", default="")
@click.pass_context
def policy_warrant(ctx, consumer_id, class_name, epochs, reason):
    """Grant a consumer one class's keys for a past epoch range."""
    first, _, last = epochs.partition(":")
    grant = _call(_admin(ctx).warrant, consumer_id, class_name, int(first), int(last or first), reason)
    click.echo(json.dumps(grant, indent=2))


@policy.command("audit")
@click.pass_context
def policy_audit(ctx):
    click.echo(json.dumps(_call(_admin(ctx).audit), indent=2))
