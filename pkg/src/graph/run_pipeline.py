from __future__ import annotations

import json
import traceback
from pathlib import Path
from typing import Any, Optional, TypedDict

import scipy.fft as sfft
from langgraph.graph import END, StateGraph
from loguru import logger

from cli.commands import CommandResult, execute
from cli.config import RunConfig, serialize_config
from infra.log import configure_logging, release_file_sink
from infra.settings import Settings
from kinetic import storage
from kinetic.cache import configure_cache, content_hash
from kinetic.errors import DivergenceError, KineticError, SweepError

EXIT_OK = 0
EXIT_FAILED_CHECKS = 1
EXIT_ERROR = 2


class RunState(TypedDict):
    """Shared state for one CLI run."""

    config: RunConfig
    output_dir: Path
    settings: Settings
    result: Optional[CommandResult]
    status: str  # "pending", "executed", "written", "error"
    error: Optional[dict[str, Any]]
    exit_code: int


def _error_payload(exc: BaseException) -> dict[str, Any]:
    payload: dict[str, Any] = {"type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, SweepError) and exc.partial is not None:
        payload["partial_rows"] = [row.model_dump() for row in exc.partial]
    if isinstance(exc, DivergenceError) and exc.history is not None:
        payload["picard_differences"] = exc.history.picard_differences
        payload["picard_contraction"] = exc.history.picard_contraction
    if not isinstance(exc, KineticError):
        payload["traceback"] = traceback.format_exception(type(exc), exc, exc.__traceback__)
    return payload


def prepare_node(state: RunState) -> RunState:
    """Create the output directory and route logs and caches for this run."""
    cfg = state["config"]
    try:
        out = state["output_dir"]
        out.mkdir(parents=True, exist_ok=True)
        configure_logging(cfg.log_level or state["settings"].LOG_LEVEL, sink_dir=out)
        configure_cache(state["settings"].CACHE_DIR or None)
        (out / "config.json").write_text(serialize_config(cfg), encoding="utf-8")
        logger.info(f"prepared run {cfg.command!r} in {out} (seed={cfg.seed}, threads={cfg.threads})")
    except Exception as exc:
        logger.error(f"Error in prepare_node: {exc}")
        state["error"] = _error_payload(exc)
        state["status"] = "error"
    return state


def execute_node(state: RunState) -> RunState:
    cfg = state["config"]
    try:
        with sfft.set_workers(cfg.threads):
            state["result"] = execute(cfg, state["output_dir"])
        state["status"] = "executed"
    except Exception as exc:
        logger.error(f"Error in execute_node: {exc}")
        state["error"] = _error_payload(exc)
        state["status"] = "error"
    return state


def write_artifacts_node(state: RunState) -> RunState:
    """summary.json plus the manifest indexing every artifact."""
    cfg, out, result = state["config"], state["output_dir"], state["result"]
    try:
        summary = {"command": cfg.command, "passed": result.passed, "checks": result.checks, "notes": result.notes}
        storage.write_json(out / "summary.json", summary)
        artifacts = [*result.artifacts, "summary.json", "config.json", "run.log"]
        storage.write_manifest(
            out,
            cfg.command,
            content_hash(json.loads(serialize_config(cfg))),
            result.signatures,
            artifacts,
            extra={"seed": cfg.seed, "threads": cfg.threads},
        )
        state["status"] = "written"
    except Exception as exc:
        logger.error(f"Error in write_artifacts_node: {exc}")
        state["error"] = _error_payload(exc)
        state["status"] = "error"
    return state


def error_node(state: RunState) -> RunState:
    """Structured error.json; the run ends with a nonzero status."""
    cfg, out = state["config"], state["output_dir"]
    try:
        storage.write_json(out / "error.json", state["error"])
        storage.write_manifest(
            out,
            cfg.command,
            content_hash(json.loads(serialize_config(cfg))),
            {},
            ["error.json", "config.json", "run.log"],
            extra={"seed": cfg.seed, "threads": cfg.threads, "status": "error"},
        )
    except Exception as exc:
        logger.error(f"Error in error_node: {exc}")
    state["exit_code"] = EXIT_ERROR
    release_file_sink()
    return state


def finalize_node(state: RunState) -> RunState:
    result = state["result"]
    state["exit_code"] = EXIT_OK if result.passed else EXIT_FAILED_CHECKS
    failed = [name for name, ok in result.checks.items() if not ok]
    if failed:
        logger.warning(f"run finished with failed checks: {failed}")
    else:
        logger.info("run finished, all checks passed")
    release_file_sink()
    return state


def _route(state: RunState) -> str:
    return "error_node" if state["status"] == "error" else "next"


def build_run_graph() -> StateGraph:
    graph = StateGraph(RunState)

    graph.add_node("prepare_node", prepare_node)
    graph.add_node("execute_node", execute_node)
    graph.add_node("write_artifacts_node", write_artifacts_node)
    graph.add_node("finalize_node", finalize_node)
    graph.add_node("error_node", error_node)

    graph.add_conditional_edges("prepare_node", _route, {"next": "execute_node", "error_node": "error_node"})
    graph.add_conditional_edges("execute_node", _route, {"next": "write_artifacts_node", "error_node": "error_node"})
    graph.add_conditional_edges("write_artifacts_node", _route, {"next": "finalize_node", "error_node": "error_node"})
    graph.add_edge("finalize_node", END)
    graph.add_edge("error_node", END)

    graph.set_entry_point("prepare_node")
    return graph


def create_initial_state(cfg: RunConfig, settings: Optional[Settings] = None) -> RunState:
    return RunState(
        config=cfg,
        output_dir=Path(cfg.output_dir),
        settings=settings or Settings(),
        result=None,
        status="pending",
        error=None,
        exit_code=EXIT_ERROR,
    )


def run_state(cfg: RunConfig, settings: Optional[Settings] = None) -> RunState:
    compiled = build_run_graph().compile()
    return compiled.invoke(create_initial_state(cfg, settings), config={"recursion_limit": 10})


def run(cfg: RunConfig, settings: Optional[Settings] = None) -> int:
    """Execute one command end to end. Never raises; the exit status carries the outcome."""
    return run_state(cfg, settings)["exit_code"]
