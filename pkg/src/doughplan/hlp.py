"""Staged plan generation: prompt assembly, plan request/parse, validation.

A language model (or a shipped fixture standing in for one) decomposes a
shaping task into single-tool stages. Each stage carries a shape program
for its subgoal plus bookkeeping (variable names, locations, volumes) that
lets us check the plan is physically plausible — chiefly that material
volume is conserved from stage to stage — before any simulation runs.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import PointCloud, ShapeNode
from .physics import ToolSpec, tool_catalog

__all__ = [
    "StagePlan",
    "PlanResponse",
    "LlmClientConfig",
    "ValidationReport",
    "PlanRequestError",
    "MissingCredentialError",
    "MissingFixtureError",
    "RequestTimeoutError",
    "EndpointError",
    "PlanParseError",
    "build_prompt",
    "request_plan",
    "parse_plan",
    "serialize_plan",
    "validate_plan",
    "compile_subgoals",
    "fixture_dir",
    "default_guidelines",
]

INITIAL_VAR = "dough"

# Relative volume change above which a plan draws a warning / is rejected.
WARN_VOLUME_CHANGE = 0.10
REJECT_VOLUME_CHANGE = 0.50


class PlanRequestError(RuntimeError):
    """Base class for failures while obtaining a plan."""


class MissingCredentialError(PlanRequestError):
    """Live mode requested but the API-key environment variable is unset."""


class MissingFixtureError(PlanRequestError):
    """Fixture mode requested but no fixture exists for the task."""


class RequestTimeoutError(PlanRequestError):
    """The endpoint did not answer within the configured timeout."""


class EndpointError(PlanRequestError):
    """The endpoint answered with an error after all retries."""


class PlanParseError(ValueError):
    """Raised when the raw plan text cannot be turned into stages."""

    def __init__(self, message: str, stage: int | None = None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


@dataclass(frozen=True)
class StagePlan:
    """One unit of work: a single tool plus the subgoal it should produce."""

    explanation: str
    tool_name: str
    shape_program: ShapeNode
    input_vars: tuple[str, ...]
    output_vars: tuple[str, ...]
    locations: dict[str, tuple[float, float, float]]
    volumes: dict[str, float]

    def declared_output_volume(self) -> float:
        return sum(self.volumes[v] for v in self.output_vars)


@dataclass(frozen=True)
class PlanResponse:
    """Ordered stages plus the raw completion they were extracted from."""

    stages: tuple[StagePlan, ...]
    raw_text: str
    model: str = "fixture"

    def __len__(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class LlmClientConfig:
    """Where and how to ask for plans.

    fixture_dir switches to offline mode: plans are read from
    <fixture_dir>/<task>.json and no network is touched. Live mode reads
    the API key from the named environment variable.
    """

    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2
    fixture_dir: str | Path | None = None

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.fixture_dir is not None and not Path(self.fixture_dir).is_dir():
            raise ValueError(f"fixture directory {self.fixture_dir!r} does not exist")


def fixture_dir() -> Path:
    """Directory of the plans shipped with the package."""
    return Path(__file__).parent / "fixtures"


_TOOL_BLURBS = {
    "capsule": ("a horizontal rolling pin; pressing down flattens dough and "
                "rolling spreads it along the surface"),
    "box": ("a thin vertical blade; moving it down through dough splits the "
            "dough into separate pieces"),
    "plate_pair": ("a two-fingered gripper; closing the plates pinches dough "
                   "and moving while closed carries it to a new location"),
    "cylinder": ("a vertical round pole; pressing it down pierces dough and "
                 "opens a hole, e.g. to form rings"),
}

_DSL_GRAMMAR = """\
Shape programs are JSON trees built from these nodes (lengths in meters,
angles in radians, world frame with y up, all coordinates absolute):
  {"type": "sphere", "center": [x,y,z], "radius": r}
  {"type": "box", "center": [x,y,z], "half_extents": [hx,hy,hz]}
  {"type": "cylinder", "center": [x,y,z], "radius": r, "height": h, "axis": "x|y|z"}
  {"type": "torus", "center": [x,y,z], "major_radius": R, "minor_radius": r, "axis": "x|y|z"}
  {"type": "union", "children": [node, ...]}
  {"type": "translate", "offset": [x,y,z], "child": node}
  {"type": "rotate", "axis": "x|y|z", "angle": a, "pivot": [x,y,z], "child": node}"""

_STAGE_SCHEMA = """\
Reply with one JSON object: {"stages": [stage, ...]}. Every stage must
contain exactly these fields:
  1. "explanation": a one-line explanation of what this step is doing.
  2. "tool_name": the name of the tool to be used.
  3. "shape_program": the program that generates the stage's target point
     cloud; remember to place shapes at their absolute world location.
  4. "input_vars" and "output_vars": the variable names for the input and
     output pieces of this stage.
  5. "locations": the location of each output piece, a dictionary keyed by
     variable name holding an [x, y, z] position.
  6. "volumes": the volume of each output piece in cubic meters, a
     dictionary keyed by variable name."""


def default_guidelines() -> list[str]:
    """House rules injected into every prompt."""
    return [
        ("Keep each stage volume-preserving: the total volume of a stage's "
         "outputs must equal the total volume of its inputs, and the final "
         "outputs must preserve the initial dough volume."),
        ("Use exactly one tool per stage; pick the tool whose motion most "
         "directly produces the stage's target shape."),
        ("Keep every shape inside the unit workspace box and resting at a "
         "physically reachable height."),
    ]


def build_prompt(task_text: str, tools: dict[str, ToolSpec],
                 guidelines: list[str] | None = None) -> str:
    """Assemble the planning prompt: tools, DSL, schema, rules, task.

    Deterministic for fixed inputs, so prompts can be cached and diffed.
    """
    if not task_text or not task_text.strip():
        raise ValueError("task text must be nonempty")
    lines = [
        "You are planning how to shape dough with rigid kitchen tools.",
        "Work the task out stage by stage, reasoning through each step in",
        "order before writing the answer: every stage uses one tool and",
        "transforms named pieces of dough into new named pieces.",
        "",
        "Available tools:",
    ]
    for name, spec in tools.items():
        kind = spec.geometry.kind
        if kind not in _TOOL_BLURBS:
            raise ValueError(f"tool {name!r} has unsupported geometry {kind!r}")
        lines.append(f"  - {name}: {_TOOL_BLURBS[kind]}")
    lines += ["", _DSL_GRAMMAR, "", _STAGE_SCHEMA, ""]
    lines.append("Guidelines:")
    for g in (guidelines if guidelines is not None else default_guidelines()):
        lines.append(f"  - {g}")
    lines += ["", f"The initial dough variable is named {INITIAL_VAR!r}.",
              "", f"Task: {task_text.strip()}"]
    return "\n".join(lines)


def _default_transport(url: str, headers: dict, body: dict, timeout: float) -> str:
    import requests

    try:
        resp = requests.post(url, headers=headers, json=body, timeout=timeout)
    except requests.Timeout as e:
        raise TimeoutError(str(e)) from e
    if resp.status_code != 200:
        raise ConnectionError(f"HTTP {resp.status_code}: {resp.text[:200]}")
    return resp.json()["choices"][0]["message"]["content"]


def request_plan(cfg: LlmClientConfig, prompt: str, task_name: str | None = None,
                 transport=None) -> str:
    """Fetch raw plan text: fixture file in offline mode, HTTP otherwise.

    `transport` is injectable for tests — fixture mode must never call it,
    and live tests can swap in a stub instead of a real network client.
    """
    if cfg.fixture_dir is not None:
        if not task_name:
            raise MissingFixtureError("fixture mode requires a task name")
        path = Path(cfg.fixture_dir) / f"{task_name}.json"
        if not path.is_file():
            raise MissingFixtureError(f"no fixture for task {task_name!r} at {path}")
        return path.read_text(encoding="utf-8")

    key = os.environ.get(cfg.api_key_env)
    if not key:
        raise MissingCredentialError(
            f"environment variable {cfg.api_key_env!r} is not set")
    send = transport if transport is not None else _default_transport
    headers = {"Authorization": f"Bearer {key}"}
    body = {"model": cfg.model,
            "messages": [{"role": "user", "content": prompt}]}
    last: Exception | None = None
    for _ in range(cfg.max_retries + 1):
        try:
            return send(cfg.endpoint, headers, body, cfg.timeout)
        except TimeoutError as e:
            last = e
        except ConnectionError as e:
            last = e
    if isinstance(last, TimeoutError):
        raise RequestTimeoutError(str(last)) from last
    raise EndpointError(str(last)) from last


_REQUIRED_FIELDS = ("explanation", "tool_name", "shape_program",
                    "input_vars", "output_vars", "locations", "volumes")


def _extract_document(raw: str) -> dict:
    """Find the plan JSON in raw completion text.

    Accepts a bare JSON document or one wrapped in a ```json fence with
    prose around it, which is how chat models usually answer.
    """
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    blocks = []
    inside = False
    current: list[str] = []
    for line in raw.splitlines():
        if line.strip().startswith("```"):
            if inside and current:
                blocks.append("\n".join(current))
                current = []
            inside = not inside
            continue
        if inside:
            current.append(line)
    for block in blocks:
        try:
            doc = json.loads(block)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "stages" in doc:
            return doc
    raise PlanParseError("no JSON plan document found in the completion text")


def _parse_stage(doc: dict, index: int, catalog: dict[str, ToolSpec]) -> StagePlan:
    if not isinstance(doc, dict):
        raise PlanParseError(f"stage must be an object, got {type(doc).__name__}",
                             stage=index)
    missing = [f for f in _REQUIRED_FIELDS if f not in doc]
    if missing:
        raise PlanParseError(f"missing required field(s) {missing}", stage=index)
    extra = sorted(set(doc) - set(_REQUIRED_FIELDS))
    if extra:
        warnings.warn(f"stage {index}: ignoring unknown field(s) {extra}",
                      stacklevel=2)
    tool_name = doc["tool_name"]
    if tool_name not in catalog:
        raise PlanParseError(
            f"unknown tool {tool_name!r} (have {sorted(catalog)})", stage=index)
    try:
        program = geometry.program_from_json(doc["shape_program"])
    except geometry.InvalidShapeError as e:
        raise PlanParseError(f"shape program does not compile: {e}",
                             stage=index) from e
    in_vars = tuple(doc["input_vars"])
    out_vars = tuple(doc["output_vars"])
    if not out_vars:
        raise PlanParseError("output_vars is empty", stage=index)
    locations = {k: tuple(float(x) for x in v) for k, v in doc["locations"].items()}
    volumes = {k: float(v) for k, v in doc["volumes"].items()}
    for var in out_vars:
        if var not in volumes:
            raise PlanParseError(f"output {var!r} missing from volumes", stage=index)
        if var not in locations:
            raise PlanParseError(f"output {var!r} missing from locations", stage=index)
        if not volumes[var] > 0:
            raise PlanParseError(f"volume of {var!r} must be positive", stage=index)
    return StagePlan(explanation=str(doc["explanation"]), tool_name=tool_name,
                     shape_program=program, input_vars=in_vars,
                     output_vars=out_vars, locations=locations, volumes=volumes)


def parse_plan(raw: str, catalog: dict[str, ToolSpec] | None = None) -> PlanResponse:
    """Turn raw completion text into validated stages."""
    catalog = catalog if catalog is not None else tool_catalog()
    doc = _extract_document(raw)
    stages_doc = doc.get("stages")
    if not isinstance(stages_doc, list) or not stages_doc:
        raise PlanParseError("plan must contain a nonempty 'stages' list")
    stages = tuple(_parse_stage(s, i, catalog) for i, s in enumerate(stages_doc))
    return PlanResponse(stages=stages, raw_text=raw,
                        model=str(doc.get("model", "fixture")))


def serialize_plan(plan: PlanResponse) -> str:
    """Inverse of parse_plan for fixture round-trips."""
    stages = []
    for s in plan.stages:
        stages.append({
            "explanation": s.explanation,
            "tool_name": s.tool_name,
            "shape_program": geometry.program_to_json(s.shape_program),
            "input_vars": list(s.input_vars),
            "output_vars": list(s.output_vars),
            "locations": {k: list(v) for k, v in s.locations.items()},
            "volumes": dict(s.volumes),
        })
    return json.dumps({"model": plan.model, "stages": stages}, indent=2)


@dataclass
class ValidationReport:
    """Volume and variable-flow audit of a parsed plan."""

    stage_changes: list[float] = field(default_factory=list)
    end_to_end_change: float = 0.0
    verdict: str = "pass"          # pass | warn | reject
    messages: list[str] = field(default_factory=list)
    flow_ok: bool = True

    @property
    def ok(self) -> bool:
        return self.verdict != "reject" and self.flow_ok

    def summary(self) -> str:
        pct = 100.0 * self.end_to_end_change
        lines = [f"end-to-end volume change {pct:.1f}% -> {self.verdict}"]
        lines += self.messages
        return "\n".join(lines)


def validate_plan(plan: PlanResponse, initial_volume: float,
                  initial_var: str = INITIAL_VAR) -> ValidationReport:
    """Audit declared volumes and variable flow.

    Per-stage and end-to-end relative volume changes come from the
    declared bookkeeping; each stage's compiled program volume is also
    checked against its declaration. Changes above the warn threshold
    draw a warning, above the reject threshold reject the plan. Variable
    flow fails if a stage consumes a name no prior stage produced.
    """
    if not initial_volume > 0:
        raise ValueError("initial_volume must be positive")
    report = ValidationReport()
    known = {initial_var: float(initial_volume)}
    consumed: set[str] = set()

    for i, stage in enumerate(plan.stages):
        vin = 0.0
        for var in stage.input_vars:
            if var not in known or var in consumed:
                report.flow_ok = False
                report.messages.append(
                    f"stage {i}: input {var!r} is not an available piece")
                continue
            vin += known[var]
        vout = stage.declared_output_volume()
        change = geometry.relative_volume_change(vin, vout) if vin > 0 else np.inf
        report.stage_changes.append(change)
        if change > REJECT_VOLUME_CHANGE:
            report.messages.append(
                f"stage {i}: volume change {100 * change:.1f}% exceeds "
                f"{100 * REJECT_VOLUME_CHANGE:.0f}%")
        elif change > WARN_VOLUME_CHANGE:
            report.messages.append(
                f"stage {i}: volume change {100 * change:.1f}% above "
                f"{100 * WARN_VOLUME_CHANGE:.0f}%")
        program_vol = geometry.shape_volume(stage.shape_program)
        declared = stage.declared_output_volume()
        if declared > 0:
            drift = abs(program_vol - declared) / declared
            if drift > WARN_VOLUME_CHANGE:
                report.messages.append(
                    f"stage {i}: compiled shape volume {program_vol:.2e} differs "
                    f"from declared {declared:.2e} by {100 * drift:.1f}%")
        for var in stage.input_vars:
            consumed.add(var)
        for var in stage.output_vars:
            known[var] = stage.volumes[var]

    live = {v: vol for v, vol in known.items() if v not in consumed}
    final_volume = sum(live.values())
    report.end_to_end_change = geometry.relative_volume_change(
        initial_volume, final_volume)
    worst = max([report.end_to_end_change] + report.stage_changes, default=0.0)
    if worst > REJECT_VOLUME_CHANGE:
        report.verdict = "reject"
    elif worst > WARN_VOLUME_CHANGE:
        report.verdict = "warn"
    return report


def compile_subgoals(plan: PlanResponse, n_points: int, seed: int = 0) -> list[PointCloud]:
    """Sample one subgoal cloud per stage; the last doubles as the target."""
    clouds = []
    for i, stage in enumerate(plan.stages):
        clouds.append(geometry.sample_shape(stage.shape_program, n_points,
                                            seed=seed + i))
    return clouds
