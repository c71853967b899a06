"""
Experiment files: TOML with [experiment], [problem] and [numeric] sections.

    [experiment]
    scenario = "space_dependent"

    [numeric]
    levels = 4          # h = 0.8, 0.4, 0.2, 0.1; tau, rho, delta coupled to h

See docs/config.md for every key.
"""
from __future__ import annotations
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Union

import tomli_w
from pydantic import ValidationError

from srcid.errors import ConfigError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.schemas import ExperimentSpec
from srcid.services.scenarios import build_scenario

attach_to_logger_names(["srcid.services.config_parser"])

_LINE_RE = re.compile(r"at line (\d+)")
_TYPE_TAGS = {"str", "float", "int", "bool"}


def _key_path(loc) -> str:
    # union branches show up in loc as type names (e.g. "str", "list[...]")
    return ".".join(str(p) for p in loc if not (isinstance(p, str) and (p in _TYPE_TAGS or "[" in p)))


def parse_config(text: str) -> ExperimentSpec:
    """Parse and validate experiment text; defaults (couplings, tolerances, seed) are filled in."""
    if not text or not text.strip():
        raise ConfigError("empty configuration")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _LINE_RE.search(str(exc))
        raise ConfigError(f"syntax error: {exc}", line=int(m.group(1)) if m else None) from exc
    if not data:
        raise ConfigError("configuration defines no section")
    spec = spec_from_dict(data)
    app_logger.debug("parsed experiment %s levels=%s", spec.name, spec.numeric.level_list)
    return spec


def spec_from_dict(data: dict) -> ExperimentSpec:
    """Validate section data; expressions must parse and evaluate on the domain."""
    if "experiment" not in data:
        raise ConfigError("missing [experiment] section", key="experiment")
    try:
        spec = ExperimentSpec.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], key=_key_path(err["loc"])) from exc
    build_scenario(spec)
    return spec


def emit_config(spec: ExperimentSpec) -> str:
    """TOML text that parses back to an equal spec (only explicitly set fields are written)."""
    data = spec.model_dump(mode="json", exclude_unset=True, exclude_none=True)
    return tomli_w.dumps(data)


def load_config(path: Union[str, Path]) -> ExperimentSpec:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    return parse_config(text)
