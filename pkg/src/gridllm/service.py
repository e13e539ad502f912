"""HTTP service exposing solvers, optimization runs, assistant sessions,
document QA, and image-classification evaluations.

Long jobs (optimization runs, evaluations) execute on a bounded worker pool
with cooperative cancellation and a polling status contract; their records are
persisted after every step, so a restarted service can still serve a run up to
its last completed step.  POSTs that create resources honor a client-supplied
Idempotency-Key header.
"""

from __future__ import annotations

import secrets
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI, Header, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import assistant as assistant_mod
from . import docqa, sa
from .dispatch import solve_dispatch
from .errors import (Cancelled, GridLLMError, Infeasible, InvalidInput,
                     TransportError, UnsupportedCost)
from .ev import solve_ev, summarize_schedule
from .gateway import ChatProvider, message_to_wire
from .mocks import mock_provider
from .opro import OproConfig, OproRunRecord, run_opro
from .problems import (DispatchProblem, EVProblem, EVSession, GeneratorParams)
from .store import Store


# ---------------------------------------------------------------------------
# Request models
# ---------------------------------------------------------------------------

class GeneratorModel(BaseModel):
    a: float
    b: float
    c: float
    p_min: float
    p_max: float


class DispatchProblemModel(BaseModel):
    units: list[GeneratorModel] = Field(min_length=1)
    demand: float


class DispatchSolveRequest(BaseModel):
    problem: DispatchProblemModel
    demand: Optional[float] = None  # optional override


class EVSessionModel(BaseModel):
    initial: float
    target: float
    u_max: float
    depart: int
    arrival: int = 0
    u_min: float = 0.0


class EVProblemModel(BaseModel):
    sessions: list[EVSessionModel] = Field(min_length=1)
    timesteps: int
    capacity: Union[float, list[float]]
    efficiency: float = 1.0


class EVSolveRequest(BaseModel):
    problem: EVProblemModel


class OproConfigModel(BaseModel):
    steps: int = 20
    top_k: int = 5
    seed_count: int = 2
    temperature: float = 1.0
    dedup_epsilon: float = 1e-3
    capacity: int = 256


class OproRunRequest(BaseModel):
    problem: DispatchProblemModel
    config: OproConfigModel = OproConfigModel()
    seed: int = 0


class SessionMessageRequest(BaseModel):
    text: str = Field(min_length=1)


class DocIngestRequest(BaseModel):
    text: str
    doc_id: Optional[str] = None
    chunk_size: int = docqa.DEFAULT_CHUNK_SIZE
    overlap: int = docqa.DEFAULT_OVERLAP


class DocQueryRequest(BaseModel):
    question: str = Field(min_length=1)
    k: int = 4
    rag: bool = True


class SAItemModel(BaseModel):
    path: str
    label: int = Field(ge=0, le=1)


class SAEvalRequest(BaseModel):
    items: list[SAItemModel]
    approach: int = Field(ge=1, le=4)
    rounds: int = 1
    seed: int = 0


def _dispatch_problem(model: DispatchProblemModel) -> DispatchProblem:
    return DispatchProblem(
        units=tuple(GeneratorParams(**u.model_dump()) for u in model.units),
        demand=model.demand,
    )


def _ev_problem(model: EVProblemModel) -> EVProblem:
    capacity = model.capacity
    if isinstance(capacity, (int, float)):
        capacity = [float(capacity)] * model.timesteps
    return EVProblem(
        sessions=tuple(EVSession(**s.model_dump()) for s in model.sessions),
        timesteps=model.timesteps,
        capacity=tuple(capacity),
        efficiency=model.efficiency,
    )


# ---------------------------------------------------------------------------
# Background jobs
# ---------------------------------------------------------------------------

class Job:
    def __init__(self, kind: str):
        self.kind = kind
        self.status = "queued"
        self.cancel_event = threading.Event()
        self.error: Optional[str] = None
        self.lock = threading.Lock()


class JobManager:
    def __init__(self, workers: int = 4):
        self.executor = ThreadPoolExecutor(max_workers=workers)
        self.jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def create(self, job_id: str, kind: str) -> Job:
        job = Job(kind)
        with self._lock:
            self.jobs[job_id] = job
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self.jobs.get(job_id)

    def shutdown(self) -> None:
        for job in list(self.jobs.values()):
            job.cancel_event.set()
        self.executor.shutdown(wait=True, cancel_futures=True)


def new_id() -> str:
    return secrets.token_hex(16)  # opaque 128-bit token


# ---------------------------------------------------------------------------
# App factory
# ---------------------------------------------------------------------------

def create_app(data_dir: Union[str, Path],
               provider: Optional[ChatProvider] = None,
               workers: int = 4,
               static_dir: Optional[Union[str, Path]] = None) -> FastAPI:
    store = Store(data_dir)
    provider = provider if provider is not None else mock_provider()
    jobs = JobManager(workers=workers)
    engine = assistant_mod.AssistantEngine(provider)
    sessions: dict[str, assistant_mod.AssistantSession] = {}
    sessions_lock = threading.Lock()
    idempotency: dict[tuple[str, str], dict] = {}
    idempotency_lock = threading.Lock()

    @asynccontextmanager
    async def lifespan(_: FastAPI):
        yield
        jobs.shutdown()

    app = FastAPI(title="gridllm service", lifespan=lifespan)
    app.state.store = store
    app.state.jobs = jobs

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_: Request, exc: RequestValidationError):
        errors = [
            {"path": ".".join(str(p) for p in err.get("loc", ())),
             "message": err.get("msg", "invalid")}
            for err in exc.errors()
        ]
        return JSONResponse(status_code=400,
                            content={"error": "validation", "fields": errors})

    @app.exception_handler(GridLLMError)
    async def domain_handler(_: Request, exc: GridLLMError):
        if isinstance(exc, TransportError):
            return JSONResponse(status_code=502,
                                content={"error": "provider", "detail": str(exc)})
        if isinstance(exc, Infeasible):
            return JSONResponse(status_code=400,
                                content={"error": "infeasible", "detail": str(exc)})
        if isinstance(exc, (InvalidInput, UnsupportedCost)):
            return JSONResponse(status_code=400,
                                content={"error": "invalid", "detail": str(exc)})
        return JSONResponse(status_code=500,
                            content={"error": "internal", "detail": str(exc)})

    def idempotent(endpoint: str, key: Optional[str], build) -> JSONResponse:
        if key:
            with idempotency_lock:
                cached = idempotency.get((endpoint, key))
            if cached is not None:
                return JSONResponse(cached)
        payload = build()
        if key:
            with idempotency_lock:
                idempotency[(endpoint, key)] = payload
        return JSONResponse(payload)

    # -- health -------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    # -- solvers ------------------------------------------------------------

    @app.post("/solve/dispatch")
    def solve_dispatch_endpoint(body: DispatchSolveRequest):
        problem = _dispatch_problem(body.problem)
        if body.demand is not None:
            problem = problem.with_demand(body.demand)
        return solve_dispatch(problem).to_dict()

    @app.post("/solve/ev")
    def solve_ev_endpoint(body: EVSolveRequest):
        problem = _ev_problem(body.problem)
        schedule = solve_ev(problem)
        summary = summarize_schedule(problem, schedule)
        return {
            "schedule": {
                "power": schedule.power.tolist(),
                "soc": schedule.soc.tolist(),
                "objective": schedule.objective,
                "objective_norm": schedule.objective_norm,
            },
            "summary": summary.to_dict(),
        }

    # -- optimization runs ---------------------------------------------------

    def _run_payload(run_id: str, status: str, record: Optional[dict],
                     error: Optional[str] = None) -> dict:
        return {"id": run_id, "status": status, "record": record,
                "error": error}

    @app.post("/opro/runs")
    def start_run(body: OproRunRequest,
                  idempotency_key: Optional[str] = Header(default=None)):
        problem = _dispatch_problem(body.problem)
        cfg = OproConfig(**body.config.model_dump())
        # Fail fast on infeasible problems before queueing the job.
        if sum(u.p_max for u in problem.units) < problem.demand:
            raise Infeasible("total capacity cannot cover demand")

        def build() -> dict:
            run_id = new_id()
            job = jobs.create(run_id, "opro")
            store.save_run(run_id, _run_payload(run_id, "queued", None))

            def persist(record: OproRunRecord, _step) -> None:
                store.save_run(run_id,
                               _run_payload(run_id, "running", record.to_dict()))

            def work() -> None:
                job.status = "running"
                try:
                    record = run_opro(
                        problem, cfg, provider, seed=body.seed,
                        should_stop=job.cancel_event.is_set, on_step=persist,
                    )
                except Exception as exc:  # noqa: BLE001 - job boundary
                    job.error = str(exc)
                    store.save_run(run_id, _run_payload(run_id, "failed", None,
                                                        str(exc)))
                    job.status = "failed"
                    return
                cancelled = record.aborted is not None and \
                    record.aborted.startswith("cancelled")
                status = "cancelled" if cancelled else "done"
                # Persist before flipping the in-memory status so a poll never
                # sees a terminal state without its record.
                store.save_run(run_id, _run_payload(run_id, status,
                                                    record.to_dict()))
                job.status = status

            jobs.executor.submit(work)
            return {"id": run_id, "status": job.status}

        return idempotent("opro", idempotency_key, build)

    @app.get("/opro/runs/{run_id}")
    def get_run(run_id: str):
        persisted = store.load_run(run_id)
        if persisted is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "id": run_id})
        job = jobs.get(run_id)
        if job is not None:
            persisted["status"] = job.status
            if job.error:
                persisted["error"] = job.error
        return persisted

    @app.post("/opro/runs/{run_id}/cancel")
    def cancel_run(run_id: str):
        job = jobs.get(run_id)
        if job is None:
            if store.load_run(run_id) is None:
                return JSONResponse(status_code=404,
                                    content={"error": "not_found", "id": run_id})
            # The run belongs to a previous service life; nothing to cancel.
            return JSONResponse(status_code=409,
                                content={"error": "illegal_state",
                                         "detail": "run is not active"})
        if job.status in ("done", "failed"):
            return JSONResponse(status_code=409,
                                content={"error": "illegal_state",
                                         "detail": f"run is {job.status}"})
        job.cancel_event.set()
        return {"id": run_id, "status": job.status, "cancelling": True}

    # -- assistant sessions ----------------------------------------------------

    def _session_payload(session: assistant_mod.AssistantSession,
                         new_messages=None) -> dict:
        payload = session.to_dict()
        if new_messages is not None:
            payload["new_messages"] = [message_to_wire(m) for m in new_messages]
        return payload

    def _get_session(session_id: str) -> Optional[assistant_mod.AssistantSession]:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            path = store.session_path(session_id)
            if path.exists():
                session = assistant_mod.AssistantSession.load(path)
                with sessions_lock:
                    sessions[session_id] = session
        return session

    @app.post("/assistant/sessions")
    def create_session(idempotency_key: Optional[str] = Header(default=None)):
        def build() -> dict:
            session = engine.new_session()
            with sessions_lock:
                sessions[session.session_id] = session
            session.save(store.sessions_dir)
            return _session_payload(session)

        return idempotent("sessions", idempotency_key, build)

    @app.get("/assistant/sessions/{session_id}")
    def get_session(session_id: str):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "id": session_id})
        return _session_payload(session)

    @app.post("/assistant/sessions/{session_id}/messages")
    def post_message(session_id: str, body: SessionMessageRequest):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "id": session_id})
        if session.state == "failed":
            return JSONResponse(status_code=409,
                                content={"error": "illegal_state",
                                         "detail": "session already failed"})
        new_messages = engine.handle_user_turn(session, body.text)
        session.save(store.sessions_dir)
        return _session_payload(session, new_messages)

    # -- documents --------------------------------------------------------------

    @app.post("/docs")
    def ingest_doc(body: DocIngestRequest,
                   idempotency_key: Optional[str] = Header(default=None)):
        def build() -> dict:
            doc_id = body.doc_id or new_id()
            index = docqa.build_index(doc_id, body.text,
                                      size=body.chunk_size,
                                      overlap=body.overlap)
            docqa.save_index(index, store.index_path(doc_id))
            return {"id": doc_id, "chunk_count": index.n_chunks,
                    "dim": index.dim, "embedder_id": index.embedder_id}

        return idempotent("docs", idempotency_key, build)

    def _load_index(doc_id: str) -> Optional[docqa.DocumentIndex]:
        path = store.index_path(doc_id)
        if not path.exists():
            return None
        return docqa.load_index(path)

    @app.get("/docs/{doc_id}")
    def get_doc(doc_id: str):
        index = _load_index(doc_id)
        if index is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "id": doc_id})
        return {"id": index.doc_id, "chunk_count": index.n_chunks,
                "dim": index.dim, "embedder_id": index.embedder_id}

    @app.post("/docs/{doc_id}/query")
    def query_doc(doc_id: str, body: DocQueryRequest):
        index = _load_index(doc_id)
        if index is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "id": doc_id})
        result = docqa.answer(index, body.question, body.k, provider,
                              use_rag=body.rag)
        return {
            "id": doc_id,
            "question": body.question,
            "rag": body.rag,
            "answer": result.text,
            "citations": [
                {"start": c.start, "end": c.end, "text": c.text,
                 "score": score}
                for c, score in result.citations
            ],
        }

    # -- situation-awareness evaluations -----------------------------------------

    @app.post("/sa/evaluations")
    def start_eval(body: SAEvalRequest,
                   idempotency_key: Optional[str] = Header(default=None)):
        manifest = [sa.ManifestItem(path=i.path, label=bool(i.label))
                    for i in body.items]

        def build() -> dict:
            eval_id = new_id()
            job = jobs.create(eval_id, "sa")
            store.save_eval(eval_id, {"id": eval_id, "status": "queued",
                                      "report": None})

            def work() -> None:
                job.status = "running"
                try:
                    report = sa.evaluate(
                        sa.SAApproach(body.approach), manifest, body.rounds,
                        provider, seed=body.seed,
                        should_stop=job.cancel_event.is_set,
                    )
                except Cancelled:
                    store.save_eval(eval_id, {"id": eval_id,
                                              "status": "cancelled",
                                              "report": None})
                    job.status = "cancelled"
                    return
                except Exception as exc:  # noqa: BLE001 - job boundary
                    job.error = str(exc)
                    store.save_eval(eval_id, {"id": eval_id, "status": "failed",
                                              "report": None, "error": str(exc)})
                    job.status = "failed"
                    return
                store.save_eval(eval_id, {"id": eval_id, "status": "done",
                                          "report": report.to_dict()})
                job.status = "done"

            jobs.executor.submit(work)
            return {"id": eval_id, "status": job.status}

        return idempotent("sa", idempotency_key, build)

    @app.get("/sa/evaluations/{eval_id}")
    def get_eval(eval_id: str):
        persisted = store.load_eval(eval_id)
        if persisted is None:
            return JSONResponse(status_code=404,
                                content={"error": "not_found", "id": eval_id})
        job = jobs.get(eval_id)
        if job is not None:
            persisted["status"] = job.status
            if job.error:
                persisted["error"] = job.error
        return persisted

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="console")

    return app
