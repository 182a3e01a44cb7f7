"""Loader for ``key = value`` text files.

Values are JSON literals (numbers, strings, arrays, ``true``/``false``); ``#``
starts a comment.  A value may continue over several lines while brackets are
open.  Errors carry the line number of the offending entry.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ModelError


class ConfigError(ModelError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.path = path
        self.line = line


def _strip_comment(line: str) -> str:
    out, in_str = [], False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def parse_config(text: str, path="<string>") -> tuple[dict, dict]:
    """Return ``(values, line_of)`` for a config text."""
    values, line_of = {}, {}
    pending_key, pending_val, start = None, "", 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if pending_key is None:
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
            key, _, val = line.partition("=")
            key = key.strip()
            if not key.replace("_", "").replace("-", "").isalnum():
                raise ConfigError(f"bad key {key!r}", path, lineno)
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", path, lineno)
            pending_key, pending_val, start = key, val.strip(), lineno
        else:
            pending_val += " " + line
        if pending_val.count("[") - pending_val.count("]") > 0:
            continue
        try:
            values[pending_key] = json.loads(pending_val)
        except json.JSONDecodeError:
            # bare words are accepted as strings (catalog ids, laws, ...)
            if pending_val and all(c.isalnum() or c in "-_./" for c in pending_val):
                values[pending_key] = pending_val
            else:
                raise ConfigError(f"cannot parse value of {pending_key!r}: {pending_val!r}",
                                  path, start) from None
        line_of[pending_key] = start
        pending_key = None
    if pending_key is not None:
        raise ConfigError(f"unterminated value for {pending_key!r}", path, start)
    return values, line_of


def load_config(path) -> tuple[dict, dict]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such file: {p}")
    return parse_config(p.read_text(), str(p))


def _check(cond, msg, path, line_of, key):
    if not cond:
        raise ConfigError(msg, path, line_of.get(key))


def model_from_config(values: dict, line_of: dict | None = None, path="<config>"):
    """Build a :class:`SymbolicModel` from parsed config values."""
    from .symbolic import SymbolicModel

    line_of = line_of or {}
    for key in ("alphabet_size", "images", "return_time", "element_mass"):
        _check(key in values, f"missing required key {key!r}", path, line_of, key)
    n = values["alphabet_size"]
    _check(isinstance(n, int) and n >= 1, "alphabet_size must be a positive integer",
           path, line_of, "alphabet_size")
    for key in ("images", "return_time", "element_mass"):
        v = values[key]
        _check(isinstance(v, list) and len(v) == n,
               f"{key} must be an array of length {n}", path, line_of, key)
    for i, img in enumerate(values["images"]):
        _check(isinstance(img, list) and img, f"images[{i}] must be a non-empty array",
               path, line_of, "images")
        _check(all(isinstance(j, int) and 0 <= j < n for j in img),
               f"images[{i}] has a symbol outside 0..{n - 1}", path, line_of, "images")
    for i, r in enumerate(values["return_time"]):
        _check(isinstance(r, int) and r >= 1, f"return_time[{i}] must be an integer >= 1",
               path, line_of, "return_time")
    for i, m in enumerate(values["element_mass"]):
        _check(isinstance(m, (int, float)) and m > 0 and m < float("inf"),
               f"element_mass[{i}] must be positive and finite", path, line_of, "element_mass")
    beta = values.get("beta", 0.5)
    _check(isinstance(beta, (int, float)) and 0 < beta < 1, "beta must lie in (0, 1)",
           path, line_of, "beta")
    kwargs = dict(images=values["images"], return_time=values["return_time"],
                  element_mass=values["element_mass"], beta=float(beta),
                  name=str(values.get("name", Path(str(path)).stem)))
    if "gibbs_constant" in values:
        kwargs["gibbs_constant"] = float(values["gibbs_constant"])
    if "delta0" in values:
        d0 = values["delta0"]
        _check(isinstance(d0, (int, float)) and d0 > 0, "delta0 must be positive",
               path, line_of, "delta0")
        kwargs["delta0"] = float(d0)
    try:
        return SymbolicModel(**kwargs)
    except ModelError as exc:
        key = "delta0" if "long-branch" in str(exc) else None
        raise ConfigError(str(exc), path, line_of.get(key, 1)) from None


def load_model(path):
    values, line_of = load_config(path)
    return model_from_config(values, line_of, str(path))


def dump_model(model) -> str:
    lines = [
        f"name = {json.dumps(model.name)}",
        f"alphabet_size = {model.alphabet_size}",
        f"images = {json.dumps([list(i) for i in model.images])}",
        f"return_time = {json.dumps(model.return_time.tolist())}",
        f"element_mass = {json.dumps(model.element_mass.tolist())}",
        f"beta = {model.beta!r}",
        f"gibbs_constant = {model.gibbs_constant!r}",
        f"delta0 = {model.delta0!r}",
    ]
    return "\n".join(lines) + "\n"
