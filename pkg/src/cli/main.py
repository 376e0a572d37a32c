from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from cli.commands import summary_rows
from cli.config import RunConfig, parse_config
from graph.run_pipeline import EXIT_ERROR, run_state
from kinetic.errors import ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinetic", description="Non-cutoff Boltzmann collision operator toolkit")
    parser.add_argument("--config", required=True, metavar="<path>", help="JSON run document")
    parser.add_argument("--output", metavar="<dir>", help="override output_dir")
    parser.add_argument("--threads", type=int, metavar="<int>", help="override threads")
    parser.add_argument("--seed", type=int, metavar="<int>", help="override seed")
    parser.add_argument("--log-level", metavar="DEBUG|INFO|WARNING", help="override log_level")
    return parser


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    update = {
        "output_dir": args.output,
        "threads": args.threads,
        "seed": args.seed,
        "log_level": args.log_level,
    }
    update = {key: value for key, value in update.items() if value is not None}
    if not update:
        return cfg
    # model_copy skips validation
    try:
        return RunConfig.model_validate({**cfg.model_dump(), **update})
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigError(error["msg"], ".".join(str(part) for part in error["loc"])) from exc


def load_config(path: Path) -> RunConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    return parse_config(text)


def print_summary(console: Console, command: str, rows: list[dict], exit_code: int, output_dir: str) -> None:
    table = Table(title=f"{command} -> {output_dir}")
    table.add_column("Check", style="cyan")
    table.add_column("Result")
    for row in rows:
        table.add_row(row["check"], "[green]pass[/green]" if row["passed"] else "[red]fail[/red]")
    console.print(table)
    console.print(f"exit status {exit_code}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    console = Console(stderr=True)
    try:
        cfg = apply_overrides(load_config(Path(args.config)), args)
    except ConfigError as exc:
        console.print(f"[red]config error[/red] {exc}")
        return EXIT_ERROR

    state = run_state(cfg)
    if state["result"] is not None:
        print_summary(console, cfg.command, summary_rows(state["result"]), state["exit_code"], cfg.output_dir)
    elif state["error"] is not None:
        console.print(f"[red]{state['error']['type']}[/red] {state['error']['message']}")
    return state["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
