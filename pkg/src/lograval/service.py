"""HTTP front end over the pipeline.

Run with ``lograval-serve`` or ``uvicorn lograval.service:app``. Each
endpoint validates its body, runs one pipeline command in the server process
and returns JSON. Package
errors come back as :class:`ErrorResponse` bodies so clients can recover the
CLI exit code.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import pipeline
from .errors import LograError
from .schemas import (
    ErrorResponse,
    EvalRequest,
    EvalResponse,
    ExtractRequest,
    ExtractResponse,
    InspectResponse,
    QueryRequest,
    QueryResponse,
    TrainRequest,
    TrainResponse,
)

HTTP_STATUS = {2: 400, 3: 409, 4: 422}


def error_body(exc: LograError) -> ErrorResponse:
    return ErrorResponse(error_kind=exc.kind, message=str(exc), exit_code=exc.exit_code)


def run_train(req: TrainRequest) -> TrainResponse:
    return TrainResponse(**pipeline.cmd_train(req.run_config()))


def run_extract(req: ExtractRequest) -> ExtractResponse:
    return ExtractResponse(**pipeline.cmd_extract(req.run_config()))


def run_query(req: QueryRequest) -> QueryResponse:
    out = pipeline.cmd_query(
        req.run_config(), req.mode, req.k, req.test_ids, req.train_ids, req.workers, req.output
    )
    return QueryResponse(**out)


def run_eval(req: EvalRequest) -> EvalResponse:
    return EvalResponse(summary=pipeline.cmd_eval(req.run_config(), req.methods, req.output_dir))


def run_inspect(path: str) -> InspectResponse:
    return InspectResponse(header=pipeline.inspect_file(path))


app = FastAPI(title="lograval")


@app.exception_handler(LograError)
async def _package_error(request: Request, exc: LograError):
    body = error_body(exc)
    return JSONResponse(status_code=HTTP_STATUS.get(exc.exit_code, 400), content=body.model_dump())


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/train", response_model=TrainResponse)
def train(req: TrainRequest):
    return run_train(req)


@app.post("/extract", response_model=ExtractResponse)
def extract(req: ExtractRequest):
    return run_extract(req)


@app.post("/query", response_model=QueryResponse)
def query(req: QueryRequest):
    return run_query(req)


@app.post("/eval", response_model=EvalResponse)
def evaluate(req: EvalRequest):
    return run_eval(req)


@app.get("/inspect", response_model=InspectResponse)
def inspect(path: str):
    return run_inspect(path)


def serve(argv=None):
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(prog="lograval-serve")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args(argv)
    uvicorn.run(app, host=args.host, port=args.port)
