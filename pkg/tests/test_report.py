from __future__ import annotations

import json
import math
import os

import numpy as np

from bufnet.report import SCHEMA_VERSION, atomic_write, config_hash, dumps, envelope, to_jsonable


def test_non_finite_and_complex_values():
    out = to_jsonable({"a": math.inf, "b": np.float64("nan"), "c": 1 + 2j, "d": np.arange(2)})
    assert out == {"a": "inf", "b": "nan", "c": [1.0, 2.0], "d": [0, 1]}


def test_dumps_is_canonical():
    assert dumps({"b": 1, "a": 2}) == dumps({"a": 2, "b": 1})
    json.loads(dumps({"x": -math.inf}))


def test_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_envelope_fields():
    env = envelope("simulate", {"x": 1}, 7, {"tol": 1e-9}, {"ok": True}, "0.1.0")
    assert env["schema_version"] == SCHEMA_VERSION and env["seed"] == 7
    assert env["tolerances"] == {"tol": 1e-9} and len(env["config_hash"]) == 64


def test_atomic_write_leaves_no_temp_files(tmp_path):
    p = tmp_path / "sub" / "r.json"
    atomic_write(str(p), "one")
    atomic_write(str(p), "two")
    assert p.read_text(encoding="utf-8") == "two"
    assert os.listdir(p.parent) == ["r.json"]
