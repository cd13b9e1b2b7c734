"""Command-line client for the stalepipe service.

Subcommands mirror the service endpoints one to one. By default each command
talks to an in-process instance of the app over an ASGI transport, so no
server needs to be running; pass ``--server URL`` to target a remote service
instead (artifacts are then written on the server's filesystem). ``serve``
starts the HTTP service under uvicorn.

Any failure exits non-zero after printing a single machine-parseable line
``error: <message>`` to stderr.
"""

from __future__ import annotations

import json
import sys

import click
import httpx

from .config import load_config_file


def _post_in_process(endpoint: str, payload: dict) -> httpx.Response:
    import asyncio

    from .service import app

    async def go():
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://stalepipe.local", timeout=None
        ) as client:
            return await client.post(endpoint, json=payload)

    return asyncio.run(go())


def _call(server: str | None, endpoint: str, payload: dict) -> dict:
    try:
        if server:
            with httpx.Client(base_url=server, timeout=3600.0) as client:
                resp = client.post(endpoint, json=payload)
        else:
            resp = _post_in_process(endpoint, payload)
    except httpx.HTTPError as exc:
        _fail(f"transport failure talking to {server or 'in-process app'}: {exc}")
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        _fail(str(detail).replace("\n", " "))
    return resp.json()


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _payload(config, seed, out, backend, extra: dict[str, str] | None = None) -> dict:
    cfg: dict[str, str] = {}
    if config:
        try:
            cfg = load_config_file(config)
        except (OSError, ValueError) as exc:
            _fail(str(exc).replace("\n", " "))
    overrides = dict(extra or {})
    if seed is not None:
        overrides["train.seed"] = str(seed)
        overrides["simulate.seed"] = str(seed)
    if backend is not None:
        overrides["train.backend"] = backend
    return {"config": cfg, "overrides": overrides, "out_dir": out}


config_opt = click.option("--config", type=click.Path(exists=True, dir_okay=False),
                          help="Flat key-value run config file.")
seed_opt = click.option("--seed", type=int, default=None, help="Override the run seed.")
out_opt = click.option("--out", type=click.Path(file_okay=False), default=None,
                       help="Directory for artifacts (default: fresh temp dir).")
server_opt = click.option("--server", default=None,
                          help="Remote service URL; default runs the app in-process.")


@click.group()
def main():
    """Block-pipelined training with stale parameters: train, simulate, check, validate."""


@main.command()
@config_opt
@server_opt
def validate(config, server):
    """Check queue sizing constraints; print derived depths and staleness."""
    result = _call(server, "/validate", _payload(config, None, None, None))
    click.echo("q = " + ",".join(str(v) for v in result["q"]))
    click.echo("staleness = " + ",".join(str(v) for v in result["staleness"]))
    click.echo(f"max_staleness = {result['max_staleness']}")


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--backend", type=click.Choice(["serial", "parallel"]), default=None)
@server_opt
def train(config, seed, out, backend, server):
    """Run queue-pipelined training; write JSONL log and per-epoch summary CSV."""
    result = _call(server, "/train", _payload(config, seed, out, backend))
    click.echo(f"steps = {result['steps']}")
    click.echo(f"records = {result['records']}")
    click.echo(f"checksum = {result['checksum']}")
    if result.get("final_train_loss") is not None:
        click.echo(f"final_train_loss = {result['final_train_loss']:.6g}")
        click.echo(f"final_train_accuracy = {result['final_train_accuracy']:.6g}")
    for name, path in result["artifacts"].items():
        click.echo(f"artifact.{name} = {path}")


@main.command()
@config_opt
@seed_opt
@out_opt
@server_opt
def simulate(config, seed, out, server):
    """Run the discrete-event schedule simulator; write traces or a slowdown table."""
    result = _call(server, "/simulate", _payload(config, seed, out, None))
    if result.get("comparison"):
        click.echo("schedule,rho,median_slowdown_pct")
        for row in result["comparison"]:
            click.echo(f"{row['schedule']},{row['rho']},{row['median_slowdown_pct']:.4g}")
    else:
        click.echo(f"schedule = {result['schedule']}")
        click.echo(f"makespan = {result['makespan']:.9g}")
        click.echo(f"steady_interval = {result['steady_interval']:.9g}")
    for name, path in (result.get("artifacts") or {}).items():
        click.echo(f"artifact.{name} = {path}")


@main.command()
@config_opt
@seed_opt
@server_opt
def gradcheck(config, seed, server):
    """Finite-difference and snapshot-reduction gradient checks; non-zero exit on failure."""
    extra = {"gradcheck.seed": str(seed)} if seed is not None else None
    result = _call(server, "/gradcheck", _payload(config, None, None, None, extra))
    click.echo(f"cases = {result['cases']}")
    click.echo(f"max_rel_err_fd = {result['max_rel_err_fd']:.3e}")
    click.echo(f"max_reduction_diff = {result['max_reduction_diff']:.3e}")
    if not result["passed"]:
        _fail(f"gradcheck failed: max_rel_err_fd={result['max_rel_err_fd']:.3e} "
              f"max_reduction_diff={result['max_reduction_diff']:.3e}")
    click.echo("passed = true")


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("stalepipe.service:app", host=host, port=port)


if __name__ == "__main__":
    main()
