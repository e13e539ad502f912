"""Command-line entry point wiring every subcommand behind shared flags.

Configuration resolves flags first, then environment variables, then the
optional TOML config file.  Exit codes: 0 success, 1 domain error, 2 usage.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click

from . import docqa, sa
from .assistant import AssistantEngine
from .dispatch import solve_dispatch, solve_dispatch_for_demand
from .errors import GridLLMError, InvalidInput
from .ev import solve_ev, summarize_schedule
from .gateway import (ENV_API_KEY, ChatProvider, LiveChatProvider,
                      ReplayProvider)
from .mocks import mock_provider
from .opro import (OproConfig, load_run_transcript, replay_provider, run_opro,
                   save_run_transcript)
from .problems import DispatchProblem, EVProblem, load_problem


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    import sys as _sys
    if _sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    return tomllib.loads(Path(path).read_text(encoding="utf-8"))


def _resolve(name: str, flag, config: dict, default=None):
    """flags > environment > config file > default."""
    if flag is not None:
        return flag
    env_value = os.environ.get(f"LLM_{name.upper()}")
    if env_value:
        return env_value
    if name in config:
        return config[name]
    return default


def _make_provider(name: str | None, config: dict,
                   require_live: bool = False) -> ChatProvider:
    name = _resolve("provider", name, config, default=None)
    if name is None:
        if os.environ.get(ENV_API_KEY):
            name = "live"
        elif require_live:
            raise click.UsageError(
                f"no provider configured: pass --provider mock or set {ENV_API_KEY}"
            )
        else:
            name = "mock"
    if name == "mock":
        return mock_provider()
    if name == "live":
        try:
            return LiveChatProvider.from_env()
        except InvalidInput as exc:
            raise click.UsageError(str(exc)) from exc
    if name.startswith("replay:"):
        return ReplayProvider.from_file(name.split(":", 1)[1])
    raise click.UsageError(
        f"unknown provider {name!r}: use mock, live, or replay:<transcript>"
    )


def _emit(payload: dict, as_json: bool, text: str | None = None) -> None:
    if as_json:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    elif text is not None:
        click.echo(text)


def _problem_file(value: str) -> Path:
    """Resolve a path or the bare name of a bundled problem fixture."""
    path = Path(value)
    if path.exists():
        return path
    bundled = Path(__file__).parent / "data" / f"{value}.toml"
    if bundled.exists():
        return bundled
    raise click.UsageError(f"problem file {value!r} not found"
                           f" (and no bundled fixture with that name)")


def _expect_dispatch(problem) -> DispatchProblem:
    if not isinstance(problem, DispatchProblem):
        raise InvalidInput("this command needs a dispatch problem file")
    return problem


def _expect_ev(problem) -> EVProblem:
    if not isinstance(problem, EVProblem):
        raise InvalidInput("this command needs an EV problem file")
    return problem


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="TOML config file.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None) -> None:
    """Power-system scheduling solvers and LLM workflows."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = _load_config(config_path)


@main.result_callback()
def _done(*_args, **_kwargs) -> None:
    pass


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

@main.group()
def dispatch() -> None:
    """Generator dispatch."""


@dispatch.command("solve")
@click.option("--problem", "problem_path", required=True)
@click.option("--demand", type=float, default=None, help="Override demand (MW).")
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--json", "as_json", is_flag=True)
def dispatch_solve(problem_path: str, demand: float | None,
                   report_path: str | None, as_json: bool) -> None:
    """Solve a dispatch problem file exactly."""
    problem = _expect_dispatch(load_problem(_problem_file(problem_path)))
    if demand is not None:
        report = solve_dispatch_for_demand(problem, demand)
    else:
        report = solve_dispatch(problem)
    payload = report.to_dict()
    if report_path:
        Path(report_path).write_text(json.dumps(payload, indent=2,
                                                sort_keys=True),
                                     encoding="utf-8")
    text = "\n".join([
        "power: " + ", ".join(f"{p:.6f}" for p in report.solution.power),
        f"cost: {report.solution.cost:.6f}",
        f"lambda: {report.lam:.6f}",
        f"iterations: {report.iterations}",
    ])
    _emit(payload, as_json, text)


# ---------------------------------------------------------------------------
# ev
# ---------------------------------------------------------------------------

@main.group()
def ev() -> None:
    """EV charging."""


@ev.command("solve")
@click.option("--problem", "problem_path", required=True)
@click.option("--schedule-out", "schedule_out", type=click.Path(), default=None,
              help="Write the power matrix as CSV (flooring at 3 decimals).")
@click.option("--json", "as_json", is_flag=True)
def ev_solve(problem_path: str, schedule_out: str | None, as_json: bool) -> None:
    """Solve an EV charging problem file."""
    problem = _expect_ev(load_problem(_problem_file(problem_path)))
    schedule = solve_ev(problem)
    summary = summarize_schedule(problem, schedule)
    if schedule_out:
        with open(schedule_out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in schedule.power:
                writer.writerow([f"{v:.3f}" for v in row])
    payload = {
        "schedule": {
            "power": schedule.power.tolist(),
            "soc": schedule.soc.tolist(),
            "objective": schedule.objective,
            "objective_norm": schedule.objective_norm,
        },
        "summary": summary.to_dict(),
    }
    _emit(payload, as_json, summary.to_text())


# ---------------------------------------------------------------------------
# opro
# ---------------------------------------------------------------------------

@main.group()
def opro() -> None:
    """Optimization by prompting."""


@opro.command("run")
@click.option("--problem", "problem_path", required=True)
@click.option("--steps", type=int, default=20, show_default=True)
@click.option("--top-k", type=int, default=5, show_default=True)
@click.option("--seed-count", type=int, default=2, show_default=True)
@click.option("--temperature", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--provider", "provider_name", default=None,
              help="mock, live, or replay:<transcript>.")
@click.option("--transcript", "transcript_path", type=click.Path(), default=None,
              help="Write a JSONL step transcript (replayable).")
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def opro_run(ctx: click.Context, problem_path: str, steps: int, top_k: int,
             seed_count: int, temperature: float, seed: int,
             provider_name: str | None, transcript_path: str | None,
             as_json: bool) -> None:
    """Run the optimization loop against a provider."""
    problem = _expect_dispatch(load_problem(_problem_file(problem_path)))
    provider = _make_provider(provider_name, ctx.obj["config"])
    cfg = OproConfig(steps=steps, top_k=top_k, seed_count=seed_count,
                     temperature=temperature)
    record = run_opro(problem, cfg, provider, seed=seed)
    if transcript_path:
        save_run_transcript(record, transcript_path)
    payload = record.to_dict()
    accepted = len(record.accepted_steps)
    text = "\n".join([
        f"steps: {len(record.steps)} (accepted {accepted})",
        f"best cost: {record.best_cost:.6f}",
        "best solution: " + ", ".join(
            f"{v:.6f}" for v in (record.best_solution or ())),
    ] + ([f"aborted: {record.aborted}"] if record.aborted else []))
    _emit(payload, as_json, text)


@opro.command("replay")
@click.option("--problem", "problem_path", required=True)
@click.option("--transcript", "transcript_path", required=True,
              type=click.Path(exists=True))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def opro_replay(problem_path: str, transcript_path: str, seed: int,
                as_json: bool) -> None:
    """Re-run a recorded transcript bit-exactly (no provider calls)."""
    problem = _expect_dispatch(load_problem(_problem_file(problem_path)))
    steps = load_run_transcript(transcript_path)
    cfg = OproConfig(steps=max(1, len(steps)))
    record = run_opro(problem, cfg, replay_provider(steps), seed=seed)
    payload = record.to_dict()
    _emit(payload, as_json, f"replayed {len(record.steps)} steps,"
                            f" best cost {record.best_cost:.6f}")


# ---------------------------------------------------------------------------
# doc
# ---------------------------------------------------------------------------

@main.group()
def doc() -> None:
    """Document knowledge retrieval."""


@doc.command("ingest")
@click.option("--file", "file_path", required=True, type=click.Path(exists=True),
              help="Plain-text document (extract PDFs beforehand).")
@click.option("--index", "index_path", required=True, type=click.Path())
@click.option("--chunk-size", type=int, default=docqa.DEFAULT_CHUNK_SIZE,
              show_default=True)
@click.option("--overlap", type=int, default=docqa.DEFAULT_OVERLAP,
              show_default=True)
@click.option("--json", "as_json", is_flag=True)
def doc_ingest(file_path: str, index_path: str, chunk_size: int, overlap: int,
               as_json: bool) -> None:
    """Chunk and embed a document into an index file."""
    text = Path(file_path).read_text(encoding="utf-8")
    index = docqa.build_index(Path(file_path).stem, text,
                              size=chunk_size, overlap=overlap)
    docqa.save_index(index, index_path)
    payload = {"id": index.doc_id, "chunk_count": index.n_chunks,
               "dim": index.dim, "embedder_id": index.embedder_id}
    _emit(payload, as_json,
          f"indexed {index.n_chunks} chunks into {index_path}")


@doc.command("ask")
@click.option("--index", "index_path", required=True,
              type=click.Path(exists=True))
@click.option("--question", required=True)
@click.option("--k", type=int, default=4, show_default=True)
@click.option("--no-rag", is_flag=True, help="Ask without retrieved context.")
@click.option("--provider", "provider_name", default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def doc_ask(ctx: click.Context, index_path: str, question: str, k: int,
            no_rag: bool, provider_name: str | None, as_json: bool) -> None:
    """Ask a question against an ingested document."""
    index = docqa.load_index(index_path)
    provider = _make_provider(provider_name, ctx.obj["config"])
    result = docqa.answer(index, question, k, provider, use_rag=not no_rag)
    payload = {
        "question": question,
        "rag": not no_rag,
        "answer": result.text,
        "citations": [{"start": c.start, "end": c.end, "score": s}
                      for c, s in result.citations],
    }
    _emit(payload, as_json, result.text)


# ---------------------------------------------------------------------------
# sa
# ---------------------------------------------------------------------------

@main.group("sa")
def sa_group() -> None:
    """Situation awareness (image classification)."""


@sa_group.command("eval")
@click.option("--approach", type=click.IntRange(1, 4), required=True)
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--rounds", type=int, default=1, show_default=True)
@click.option("--provider", "provider_name", default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def sa_eval(ctx: click.Context, approach: int, manifest_path: str, rounds: int,
            provider_name: str | None, seed: int, report_path: str | None,
            as_json: bool) -> None:
    """Evaluate an image-classification prompting approach."""
    manifest = sa.load_manifest(manifest_path)
    provider = _make_provider(provider_name, ctx.obj["config"])
    report = sa.evaluate(sa.SAApproach(approach), manifest, rounds, provider,
                         seed=seed)
    payload = report.to_dict()
    if report_path:
        Path(report_path).write_text(json.dumps(payload, indent=2,
                                                sort_keys=True),
                                     encoding="utf-8")
    accuracies = ", ".join(f"{r.accuracy:.2f}" for r in report.rounds)
    _emit(payload, as_json,
          f"mean accuracy {report.mean_accuracy:.3f} over {rounds} rounds"
          f" ({accuracies})")


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

@main.command("serve")
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-dir", "data_dir", required=True, type=click.Path())
@click.option("--provider", "provider_name", default=None)
@click.option("--static-dir", "static_dir", type=click.Path(), default=None,
              help="Serve the operator console from this directory.")
@click.pass_context
def serve(ctx: click.Context, port: int, host: str, data_dir: str,
          provider_name: str | None, static_dir: str | None) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    provider = _make_provider(provider_name, ctx.obj["config"])
    app = create_app(data_dir, provider=provider, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port)


# ---------------------------------------------------------------------------
# chat
# ---------------------------------------------------------------------------

@main.command("chat")
@click.option("--provider", "provider_name", default=None,
              help="Defaults to mock unless credentials are present.")
@click.option("--sessions-dir", "sessions_dir", type=click.Path(), default=None)
@click.pass_context
def chat(ctx: click.Context, provider_name: str | None,
         sessions_dir: str | None) -> None:
    """Terminal REPL for the EV charging assistant."""
    provider = _make_provider(provider_name, ctx.obj["config"])
    engine = AssistantEngine(provider)
    session = engine.new_session()
    click.echo(session.transcript[-1].text_content)
    while session.state not in ("explained", "failed"):
        try:
            text = click.prompt("you", prompt_suffix="> ")
        except (EOFError, click.Abort):
            break
        for message in engine.handle_user_turn(session, text):
            if message.role == "assistant":
                click.echo(f"assistant: {message.text_content}")
            elif message.text_content.startswith("Execution result"):
                click.echo(message.text_content)
    if sessions_dir:
        path = session.save(sessions_dir)
        click.echo(f"session saved to {path}")


def run_main() -> None:
    try:
        main(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(2)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(2)
    except GridLLMError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    run_main()
