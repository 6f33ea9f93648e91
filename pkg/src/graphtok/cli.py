"""Thin command-line client for the stage service.

By default every subcommand talks to an in-process application instance,
so no daemon is needed; `--server URL` targets a running `graphtok
serve` instead. Errors print one `error: ...` line to stderr and exit
nonzero.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click


def _make_client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=3600.0)
    from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app, raise_server_exceptions=False)


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _post(ctx, path: str, body: dict) -> dict:
    client = _make_client(ctx.obj["server"])
    try:
        response = client.post(path, json=body)
    except Exception as exc:
        _fail(f"request failed: {exc}")
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        _fail(detail)
    return response.json()


def _stage_body(config, out_dir, seed) -> dict:
    body = {"out_dir": str(out_dir)}
    if config is not None:
        body["config_text"] = Path(config).read_text()
    if seed is not None:
        body["seed"] = seed
    return body


def _print_kv(data: dict):
    for k, v in data.items():
        click.echo(f"{k}={v}")


_config_opt = click.option("--config", type=click.Path(exists=True), default=None,
                           help="Key=value config file; defaults apply if omitted.")
_out_opt = click.option("--out-dir", required=True, type=click.Path(),
                        help="Artifact directory.")
_seed_opt = click.option("--seed", type=int, default=None, help="Override config seed.")


@click.group()
@click.option("--server", default=None, envvar="GRAPHTOK_SERVER",
              help="Base URL of a running service; default is in-process.")
@click.pass_context
def main(ctx, server):
    """Graph tokenization and sequence-transformer classification."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


def _stage_command(name: str, endpoint: str):
    @main.command(name=name)
    @_config_opt
    @_out_opt
    @_seed_opt
    @click.pass_context
    def cmd(ctx, config, out_dir, seed):
        data = _post(ctx, endpoint, _stage_body(config, out_dir, seed))
        _print_kv(data.get("summary") or data.get("metrics") or {})

    cmd.__doc__ = f"Run the {name} stage."
    return cmd


_stage_command("train-tokenizer", "/train-tokenizer")
_stage_command("tokenize", "/tokenize")
_stage_command("serialize", "/serialize")
_stage_command("train-transformer", "/train-transformer")
_stage_command("run-all", "/run-all")


@main.command(name="eval")
@_config_opt
@_out_opt
@_seed_opt
@click.option("--split", type=click.Choice(["train", "valid", "test"]), default="test")
@click.pass_context
def eval_cmd(ctx, config, out_dir, seed, split):
    """Evaluate the trained model on a split."""
    body = _stage_body(config, out_dir, seed)
    body["split"] = split
    data = _post(ctx, "/eval", body)
    _print_kv(data.get("metrics", {}))


@main.command(name="memory-report")
@click.option("--num-nodes", "-n", type=int, required=True)
@click.option("--feature-dim", type=int, required=True)
@click.option("--num-codebooks", type=int, required=True)
@click.option("--codebook-size", type=int, required=True)
@click.option("--code-dim", type=int, required=True)
@click.option("--bytes-per-float", type=int, default=4)
@click.option("--bytes-per-index", type=int, default=4)
@click.pass_context
def memory_report_cmd(ctx, num_nodes, feature_dim, num_codebooks, codebook_size,
                      code_dim, bytes_per_float, bytes_per_index):
    """Compression ratios for a feature matrix vs its token table."""
    body = {"num_nodes": num_nodes, "feature_dim": feature_dim,
            "num_codebooks": num_codebooks, "codebook_size": codebook_size,
            "code_dim": code_dim, "bytes_per_float": bytes_per_float,
            "bytes_per_index": bytes_per_index}
    data = _post(ctx, "/memory-report", body)
    _print_kv(data.get("metrics", {}))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
