"""Command-line front end.

Every subcommand is a thin client of the HTTP API: by default requests run
against an in-process instance of the service app, and ``--server URL``
points them at a running daemon instead (start one with ``camrefine serve``).
Flag defaults can come from a YAML config file via ``--config``; explicit
flags override file values.

Exit codes: 0 success, 1 hard error, 3 batch finished with per-entry failures.
"""
from __future__ import annotations

import json
import sys
from typing import Dict, Optional

import click
import yaml

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 3


class ServiceClient:
    """HTTP client for the service; in-process ASGI when no server URL is given."""

    def __init__(self, server: Optional[str] = None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=600.0)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: Dict) -> Dict:
        response = self._client.post(path, json=payload)
        body = response.json()
        if response.status_code >= 400:
            detail = body.get("detail", body) if isinstance(body, dict) else body
            raise click.ClickException(str(detail))
        return body

    def get(self, path: str) -> Dict:
        response = self._client.get(path)
        if response.status_code >= 400:
            raise click.ClickException(f"GET {path} -> {response.status_code}")
        return response.json()


def _load_config(path: Optional[str]) -> Dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise click.ClickException(f"{path}: config must be a mapping")
    return data


def _cfg(config: Dict, key: str, flag_value, default=None):
    """Flag beats config file beats default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _require(value, name: str):
    if value is None:
        raise click.ClickException(f"missing required option --{name} (or config key '{name}')")
    return value


def _dataset_payload(config, list_file, images, labels, saliency, class_file, class_names):
    names = _cfg(config, "class_names", class_names)
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    return {
        "list_file": _require(_cfg(config, "list", list_file), "list"),
        "image_dir": _require(_cfg(config, "images", images), "images"),
        "label_dir": _cfg(config, "labels", labels),
        "saliency_dir": _cfg(config, "saliency", saliency),
        "class_file": _cfg(config, "class_file", class_file),
        "class_names": names,
    }


def _print_report(report: Dict) -> int:
    click.echo(f"job          : {report['job']}")
    click.echo(f"processed    : {len(report['processed'])}")
    click.echo(f"failures     : {len(report['failures'])}")
    click.echo(f"config digest: {report['config_digest']}")
    click.echo(f"output digest: {report['output_digest']}")
    for failure in report["failures"]:
        click.echo(f"  failed {failure['entry_id']}: {failure['message']}", err=True)
    return EXIT_PARTIAL if report["partial"] else EXIT_OK


@click.group()
@click.option("--server", envvar="CAMREFINE_SERVER", default=None,
              help="Base URL of a running service; default runs in-process.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML file with default option values.")
@click.pass_context
def main(ctx, server, config_path):
    """Refine classifier activation maps into evaluated segmentation pseudo labels."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server
    ctx.obj["config"] = _load_config(config_path)


def _client(ctx) -> ServiceClient:
    return ServiceClient(server=ctx.obj.get("server"))


_dataset_options = [
    click.option("--list", "list_file", default=None, help="Dataset list file (one id per line)."),
    click.option("--images", default=None, help="Image directory."),
    click.option("--labels", default=None, help="Ground-truth label directory."),
    click.option("--saliency", default=None, help="Saliency map directory."),
    click.option("--class-file", default=None, help="Sidecar mapping id -> class names."),
    click.option("--class-names", default=None,
                 help="Comma-separated class vocabulary (default: VOC-20)."),
]


def dataset_options(fn):
    for opt in reversed(_dataset_options):
        fn = opt(fn)
    return fn


@main.command()
@click.option("--model", default=None, help="ONNX model path.")
@click.option("--manifest", default=None, help="Model manifest path.")
@dataset_options
@click.option("--out", default=None, help="Output directory for response maps.")
@click.option("--workers", type=int, default=None)
@click.pass_context
def cam(ctx, model, manifest, list_file, images, labels, saliency, class_file,
        class_names, out, workers):
    """Plain class-conditional activation maps (the baseline)."""
    cfg = ctx.obj["config"]
    payload = {
        "classifier": {"model_path": _require(_cfg(cfg, "model", model), "model"),
                       "manifest_path": _require(_cfg(cfg, "manifest", manifest), "manifest")},
        "dataset": _dataset_payload(cfg, list_file, images, labels, saliency,
                                    class_file, class_names),
        "output_dir": _require(_cfg(cfg, "out", out), "out"),
        "workers": int(_cfg(cfg, "workers", workers, 1)),
    }
    sys.exit(_print_report(_client(ctx).post("/jobs/cam", payload)))


@main.command()
@click.option("--model", default=None)
@click.option("--manifest", default=None)
@dataset_options
@click.option("--out", default=None)
@click.option("--workers", type=int, default=None)
@click.option("--erase-threshold", type=float, default=None)
@click.option("--stop-fraction", type=float, default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--no-split", is_flag=True, default=False,
              help="Skip split & unite; iterate on the whole image.")
@click.pass_context
def infer(ctx, model, manifest, list_file, images, labels, saliency, class_file,
          class_names, out, workers, erase_threshold, stop_fraction, max_iterations,
          no_split):
    """Refined maps via split & unite plus iterative inference."""
    cfg = ctx.obj["config"]
    payload = {
        "classifier": {"model_path": _require(_cfg(cfg, "model", model), "model"),
                       "manifest_path": _require(_cfg(cfg, "manifest", manifest), "manifest")},
        "dataset": _dataset_payload(cfg, list_file, images, labels, saliency,
                                    class_file, class_names),
        "output_dir": _require(_cfg(cfg, "out", out), "out"),
        "workers": int(_cfg(cfg, "workers", workers, 1)),
        "refinement": {
            "erase_threshold": float(_cfg(cfg, "erase_threshold", erase_threshold, 0.7)),
            "stop_fraction": float(_cfg(cfg, "stop_fraction", stop_fraction, 0.01)),
            "max_iterations": int(_cfg(cfg, "max_iterations", max_iterations, 8)),
            "use_split": not (no_split or _cfg(cfg, "no_split", None, False)),
        },
    }
    sys.exit(_print_report(_client(ctx).post("/jobs/infer", payload)))


@main.command()
@click.option("--maps", default=None, help="Directory of stored response maps.")
@dataset_options
@click.option("--bg-threshold", type=float, default=None)
@click.option("--out", default=None)
@click.option("--workers", type=int, default=None)
@click.pass_context
def pseudo(ctx, maps, list_file, images, labels, saliency, class_file, class_names,
           bg_threshold, out, workers):
    """Pseudo-label PNGs from stored maps at one background threshold."""
    cfg = ctx.obj["config"]
    payload = {
        "maps_dir": _require(_cfg(cfg, "maps", maps), "maps"),
        "dataset": _dataset_payload(cfg, list_file, images, labels, saliency,
                                    class_file, class_names),
        "bg_threshold": float(_require(_cfg(cfg, "bg_threshold", bg_threshold),
                                       "bg-threshold")),
        "output_dir": _require(_cfg(cfg, "out", out), "out"),
        "workers": int(_cfg(cfg, "workers", workers, 1)),
    }
    sys.exit(_print_report(_client(ctx).post("/jobs/pseudo", payload)))


@main.command()
@click.option("--maps", default=None)
@dataset_options
@click.option("--thresholds", default=None,
              help="Comma-separated sweep grid (default 0.05..0.95 step 0.05).")
@click.option("--out", default=None, help="Directory for report.txt and curve.csv.")
@click.option("--workers", type=int, default=None)
@click.pass_context
def eval(ctx, maps, list_file, images, labels, saliency, class_file, class_names,
         thresholds, out, workers):
    """Threshold sweep, best mIoU, activation recall, class-count breakdown."""
    cfg = ctx.obj["config"]
    grid = _cfg(cfg, "thresholds", thresholds)
    if isinstance(grid, str):
        grid = [float(t) for t in grid.split(",") if t.strip()]
    payload = {
        "maps_dir": _require(_cfg(cfg, "maps", maps), "maps"),
        "dataset": _dataset_payload(cfg, list_file, images, labels, saliency,
                                    class_file, class_names),
        "thresholds": grid,
        "output_dir": _cfg(cfg, "out", out),
        "workers": int(_cfg(cfg, "workers", workers, 1)),
    }
    report = _client(ctx).post("/jobs/eval", payload)
    code = _print_report(report)
    extra = report["extra"]
    click.echo(f"best threshold: {extra['best_threshold']}")
    click.echo(f"best mIoU     : {extra['best_miou']}")
    click.echo(f"recall        : {extra['activated_recall']}")
    for bucket, value in (extra.get("breakdown") or {}).items():
        click.echo(f"mIoU [{bucket:>5}] : {value}")
    sys.exit(code)


@main.command(name="loss-check")
@click.option("--seed", type=int, default=None)
@click.option("--trials", type=int, default=None)
@click.option("--class-counts", default=None, help="Comma-separated, default 2,20.")
@click.option("--height", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--fd-step", type=float, default=None)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.pass_context
def loss_check(ctx, seed, trials, class_counts, height, width, alpha, fd_step, tolerance):
    """Verify analytic loss gradients against central finite differences."""
    cfg = ctx.obj["config"]
    counts = _cfg(cfg, "class_counts", class_counts)
    if isinstance(counts, str):
        counts = [int(c) for c in counts.split(",") if c.strip()]
    payload = {
        "seed": int(_cfg(cfg, "seed", seed, 0)),
        "trials": int(_cfg(cfg, "trials", trials, 20)),
        "class_counts": counts or [2, 20],
        "height": int(_cfg(cfg, "height", height, 4)),
        "width": int(_cfg(cfg, "width", width, 4)),
        "alpha": float(_cfg(cfg, "alpha", alpha, 0.08)),
        "fd_step": float(_cfg(cfg, "fd_step", fd_step, 1e-3)),
    }
    report = _client(ctx).post("/loss/check", payload)
    click.echo(f"cases           : {len(report['cases'])}")
    click.echo(f"max rel error   : {report['max_rel_error']:.3e}")
    if report["max_rel_error"] >= tolerance:
        click.echo(f"FAILED tolerance {tolerance}", err=True)
        sys.exit(EXIT_ERROR)
    sys.exit(EXIT_OK)


@main.command()
@click.option("--maps", default=None)
@dataset_options
@click.option("--out", default=None)
@click.option("--opacity", type=float, default=None)
@click.option("--workers", type=int, default=None)
@click.pass_context
def overlay(ctx, maps, list_file, images, labels, saliency, class_file, class_names,
            out, opacity, workers):
    """Heatmap overlays of stored maps onto their images."""
    cfg = ctx.obj["config"]
    payload = {
        "maps_dir": _require(_cfg(cfg, "maps", maps), "maps"),
        "dataset": _dataset_payload(cfg, list_file, images, labels, saliency,
                                    class_file, class_names),
        "output_dir": _require(_cfg(cfg, "out", out), "out"),
        "opacity": float(_cfg(cfg, "opacity", opacity, 0.5)),
        "workers": int(_cfg(cfg, "workers", workers, 1)),
    }
    sys.exit(_print_report(_client(ctx).post("/jobs/overlay", payload)))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8321, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
