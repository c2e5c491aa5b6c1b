"""Command-line client.

Parses the run configuration locally, then drives the HTTP service —
in-process by default, or a remote instance via --server. Exit codes:
0 success, 2 bad input, 3 training divergence, 4 bankruptcy.
"""

from __future__ import annotations

import os
import sys

import click

from .errors import BlagentError
from .runconfig import RunConfig
from .service.app import create_app, exit_code_for

ABLATION_FLAGS = ["positional_encoding", "maximize_rho", "softmax_head",
                  "one_day_period"]
DEFAULT_CONFIG = "run.ini"


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.UsageError(f"--set needs SECTION.KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(config_path, overrides: dict) -> RunConfig:
    if config_path is not None:
        return RunConfig.from_ini(config_path, overrides)
    if os.path.exists(DEFAULT_CONFIG):
        return RunConfig.from_ini(DEFAULT_CONFIG, overrides)
    return RunConfig.default(overrides)


def _post(ctx, path: str, payload: dict) -> dict:
    server = ctx.obj["server"]
    if server:
        import httpx
        with httpx.Client(base_url=server, timeout=None) as client:
            resp = client.post(path, json=payload)
    else:
        from fastapi.testclient import TestClient
        with TestClient(create_app()) as client:
            resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            body = resp.json()
        except ValueError:
            click.echo(f"error: HTTP {resp.status_code}", err=True)
            sys.exit(1)
        click.echo(f"error ({body.get('error', '?')}): {body.get('message', '')}",
                   err=True)
        sys.exit(int(body.get("exit_code", 1)))
    return resp.json()


def _config_payload(ctx, extra_overrides: dict | None = None) -> dict:
    overrides = dict(ctx.obj["overrides"])
    overrides.update(extra_overrides or {})
    try:
        cfg = _load_config(ctx.obj["config_path"], overrides)
    except BlagentError as exc:
        click.echo(f"error ({type(exc).__name__}): {exc}", err=True)
        sys.exit(exit_code_for(exc))
    return cfg.to_mapping()


def _print_table(rows):
    header = f"{'name':<12}{'AR':>12}{'DR':>12}{'Std':>12}{'SR':>12}{'LStd':>12}{'STR':>12}  flags"
    click.echo(header)
    for r in rows:
        cells = "".join(f"{r[c]:>12.6g}" for c in ("AR", "DR", "Std", "SR", "LStd", "STR"))
        click.echo(f"{r['name']:<12}{cells}  {';'.join(r['flags'])}")


@click.group()
@click.option("--config", "config_path", default=None,
              type=click.Path(), metavar="PATH",
              help=f"INI configuration file (default: {DEFAULT_CONFIG} if present).")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one config value; wins over the file.")
@click.option("--server", default=None, metavar="URL",
              help="Send commands to a running service instead of in-process.")
@click.pass_context
def main(ctx, config_path, overrides, server):
    """Train and evaluate the portfolio agent."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = _parse_overrides(overrides)
    ctx.obj["server"] = server


@main.command()
@click.pass_context
def ingest(ctx):
    """Align the raw price CSV into the cached panel."""
    out = _post(ctx, "/ingest", {"config": _config_payload(ctx)})
    click.echo(f"ingested {out['tickers']} tickers x {out['days']} days "
               f"({out['start']} .. {out['end']})")
    click.echo(f"cache: {out['cache']}")
    click.echo(f"data hash: {out['data_hash']}")


@main.command()
@click.option("--ablation", "ablations", multiple=True,
              type=click.Choice(ABLATION_FLAGS),
              help="Enable a variant switch (repeatable).")
@click.pass_context
def train(ctx, ablations):
    """Fit the policy on the training window."""
    extra = {f"ablation.{flag}": "true" for flag in ablations}
    out = _post(ctx, "/train", {"config": _config_payload(ctx, extra)})
    click.echo(f"variant={out['variant']} stages={out['stages']} steps={out['steps']}")
    click.echo(f"final OP={out['OP']} EF={out['EF']} "
               f"AR_tr={out['AR_tr']} ARD_tr={out['ARD_tr']}")
    click.echo(f"trace: {out['trace']}")
    click.echo(f"checkpoint: {out['checkpoint']}")


@main.command()
@click.option("--checkpoint", default=None, type=click.Path(), metavar="PATH",
              help="Policy checkpoint (default: the last trained one).")
@click.option("--baselines-only", is_flag=True,
              help="Skip the agent; score only the baseline strategies.")
@click.pass_context
def backtest(ctx, checkpoint, baselines_only):
    """Score strategies on the evaluation window."""
    payload = {"config": _config_payload(ctx), "checkpoint": checkpoint,
               "baselines_only": baselines_only}
    out = _post(ctx, "/backtest", payload)
    _print_table(out["reports"])


@main.command()
@click.pass_context
def report(ctx):
    """Merge backtest results into one comparison CSV."""
    out = _post(ctx, "/report", {"config": _config_payload(ctx)})
    _print_table(out["rows"])
    click.echo(f"csv: {out['csv']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.pass_context
def serve(ctx, host, port):
    """Run the HTTP service."""
    import uvicorn
    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
