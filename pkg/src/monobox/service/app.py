"""HTTP front end: one POST endpoint per pipeline operation.

Domain errors (bad inputs, malformed files, diverged training) surface as
HTTP 400 with the exception message; everything else is a 500 as usual.
"""

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..kitti_io import ParseError
from . import ops, schemas

app = FastAPI(title="monobox", version=__version__)

_CLIENT_ERRORS = (ValueError, ParseError, RuntimeError, OSError)


@app.exception_handler(ValueError)
@app.exception_handler(RuntimeError)
@app.exception_handler(OSError)
async def _domain_error(request: Request, exc: Exception) -> JSONResponse:
    return JSONResponse(status_code=400, content={"detail": str(exc)})


@app.get("/health", response_model=schemas.HealthResponse)
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/synth", response_model=schemas.SynthResponse)
def synth(req: schemas.SynthRequest) -> dict:
    return ops.run_synth(**req.model_dump())


@app.post("/stats", response_model=schemas.StatsResponse)
def stats(req: schemas.StatsRequest) -> dict:
    return ops.run_stats(**req.model_dump())


@app.post("/train", response_model=schemas.TrainResponse)
def train(req: schemas.TrainRequest) -> dict:
    return ops.run_train(**req.model_dump())


@app.post("/predict", response_model=schemas.PredictResponse)
def predict(req: schemas.PredictRequest) -> dict:
    return ops.run_predict(**req.model_dump())


@app.post("/eval", response_model=schemas.EvalResponse)
def eval_(req: schemas.EvalRequest) -> dict:
    return ops.run_eval(**req.model_dump())


@app.post("/bench", response_model=schemas.BenchResponse)
def bench(req: schemas.BenchRequest) -> dict:
    return ops.run_bench(**req.model_dump())
