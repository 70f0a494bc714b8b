"""Graph serialization.

Two on-disk forms:

* text: a human-readable listing, one equation per line, stable enough to
  diff. Write-only.
* canonical: a byte-exact, length-prefixed record stream (header line
  ``FEDGRAPH/1``). Floats are stored as C99 hex literals and arrays as raw
  byte hex, so parse(serialize(g)) reproduces the graph bit for bit and
  serialize is deterministic byte for byte.

comm_summary() lists the communication primitives of a graph in execution
order together with their operand shapes, which is how tests pin down the
communication pattern of a transformed graph.
"""

from __future__ import annotations

import string
from typing import IO

import numpy as np

from .errors import GraphError, ParseError
from .ir import AbstractValue, Graph, Var, is_comm, primitive_def, validate_graph
from .placement import Placement
from .tensor import dtype_from_name, dtype_name

MAGIC = "FEDGRAPH/1"


# ---------------------------------------------------------------------------
# text form

def _name_stream():
    letters = string.ascii_lowercase
    k = 1
    while True:
        for combo in _combos(letters, k):
            yield combo
        k += 1


def _combos(letters, k):
    if k == 1:
        yield from letters
        return
    for head in letters:
        for tail in _combos(letters, k - 1):
            yield head + tail


def _aval_text(aval: AbstractValue) -> str:
    return repr(aval)


def _param_text(value) -> str:
    if isinstance(value, Graph):
        return serialize_text(value)
    if isinstance(value, np.ndarray):
        flat = ",".join(repr(float(x)) for x in value.reshape(-1))
        shape = ",".join(str(d) for d in value.shape)
        return f"{value.dtype.name}[{shape}]({flat})"
    return repr(value)


def serialize_text(g: Graph, indent: str = "") -> str:
    names = {}
    stream = _name_stream()
    for v in g.inputs:
        names[v.id] = next(stream)
    for eq in g.equations:
        for v in eq.outputs:
            names[v.id] = next(stream)

    def ref(v: Var) -> str:
        return f"{names[v.id]}:{_aval_text(v.aval)}"

    header = " ".join(ref(v) for v in g.inputs)
    lines = [f"{indent}{{ lambda ; {header} ."]
    body_indent = indent + "    "
    let = f"{indent}  let "
    for eq in g.equations:
        outs = " ".join(ref(v) for v in eq.outputs)
        prim = eq.primitive
        if eq.params:
            parts = []
            for key in sorted(eq.params):
                value = eq.params[key]
                if isinstance(value, Graph):
                    nested = serialize_text(value, body_indent).lstrip()
                    parts.append(f"{key}={nested}")
                else:
                    parts.append(f"{key}={_param_text(value)}")
            prim += "[" + " ".join(parts) + "]"
        ins = " ".join(names[v.id] for v in eq.inputs)
        lines.append(f"{let}{outs} = {prim}{' ' + ins if ins else ''}")
        let = f"{indent}      "
    rets = ",".join(names[v.id] for v in g.outputs)
    lines.append(f"{indent}  in ({rets},) }}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# canonical form: <len>:<payload>\n records

def _emit(out: IO[bytes], payload: str) -> None:
    data = payload.encode("utf-8")
    out.write(str(len(data)).encode("ascii") + b":" + data + b"\n")


def _placement_token(p: Placement | None) -> str:
    return "-" if p is None else p.value


def _shape_token(shape: tuple[int, ...]) -> str:
    return "-" if shape == () else ",".join(str(d) for d in shape)


def _param_records(out: IO[bytes], key: str, value) -> None:
    if isinstance(value, bool):
        _emit(out, f"param {key} b {'true' if value else 'false'}")
    elif isinstance(value, int):
        _emit(out, f"param {key} i {value}")
    elif isinstance(value, float):
        _emit(out, f"param {key} f {value.hex()}")
    elif isinstance(value, str):
        _emit(out, f"param {key} s {value}")
    elif isinstance(value, np.ndarray):
        arr = value if value.flags.c_contiguous else np.array(value, order="C")
        _emit(
            out,
            f"param {key} a {arr.dtype.name} {_shape_token(arr.shape)} "
            f"{arr.tobytes().hex()}",
        )
    elif isinstance(value, Graph):
        _emit(out, f"param {key} g")
        _write_graph(out, value)
    else:
        raise GraphError(f"cannot serialize parameter {key}={value!r}")


def _write_graph(out: IO[bytes], g: Graph) -> None:
    ids: dict[int, int] = {}
    _emit(out, MAGIC)
    _emit(out, f"clients {g.client_count}")
    _emit(out, f"inputs {len(g.inputs)}")
    for v in g.inputs:
        ids[v.id] = len(ids)
        _emit(
            out,
            f"in {dtype_name(v.aval.dtype)} {_shape_token(v.aval.shape)} "
            f"{_placement_token(v.aval.placement)}",
        )
    _emit(out, f"equations {len(g.equations)}")
    for eq in g.equations:
        in_tok = ",".join(str(ids[v.id]) for v in eq.inputs) or "-"
        keys = sorted(eq.params)
        _emit(out, f"eq {eq.primitive} {in_tok} {len(eq.outputs)} {len(keys)}")
        for key in keys:
            _param_records(out, key, eq.params[key])
        for v in eq.outputs:
            ids[v.id] = len(ids)
    _emit(out, f"ret {','.join(str(ids[v.id]) for v in g.outputs) or '-'}")
    _emit(out, "end")


def serialize_canonical(g: Graph) -> bytes:
    import io

    buf = io.BytesIO()
    _write_graph(buf, g)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def fail(self, message: str, at: int | None = None):
        raise ParseError(message, self.pos if at is None else at)

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)

    def record(self) -> str:
        start = self.pos
        if self.done:
            self.fail("unexpected end of stream")
        colon = self.data.find(b":", self.pos)
        if colon < 0:
            self.fail("record is missing the length separator ':'", start)
        digits = self.data[self.pos : colon]
        if not digits.isdigit():
            self.fail(f"bad record length {digits!r}", start)
        length = int(digits)
        payload_start = colon + 1
        payload_end = payload_start + length
        if payload_end > len(self.data):
            self.fail("record payload runs past end of stream", start)
        if payload_end == len(self.data) or self.data[payload_end] != ord("\n"):
            self.fail("record payload is not newline-terminated", start)
        payload = self.data[payload_start:payload_end]
        self.pos = payload_end + 1
        try:
            return payload.decode("utf-8")
        except UnicodeDecodeError:
            self.fail("record payload is not valid UTF-8", payload_start)

    def expect(self, prefix: str) -> list[str]:
        at = self.pos
        rec = self.record()
        parts = rec.split(" ")
        if parts[0] != prefix:
            self.fail(f"expected {prefix!r} record, got {rec!r}", at)
        return parts[1:]


def _parse_shape(token: str, reader: _Reader, at: int) -> tuple[int, ...]:
    if token == "-":
        return ()
    try:
        return tuple(int(d) for d in token.split(","))
    except ValueError:
        reader.fail(f"bad shape token {token!r}", at)


def _parse_placement(token: str, reader: _Reader, at: int) -> Placement | None:
    if token == "-":
        return None
    try:
        return Placement(token)
    except ValueError:
        reader.fail(f"bad placement token {token!r}", at)


def _parse_param(reader: _Reader):
    at = reader.pos
    rec = reader.record()
    parts = rec.split(" ", 3)
    if parts[0] != "param" or len(parts) < 3:
        reader.fail(f"expected 'param' record, got {rec!r}", at)
    key, code = parts[1], parts[2]
    rest = parts[3] if len(parts) > 3 else ""
    if code == "i":
        try:
            return key, int(rest)
        except ValueError:
            reader.fail(f"bad integer parameter {rest!r}", at)
    if code == "f":
        try:
            return key, float.fromhex(rest)
        except ValueError:
            reader.fail(f"bad float parameter {rest!r}", at)
    if code == "s":
        return key, rest
    if code == "b":
        if rest not in ("true", "false"):
            reader.fail(f"bad boolean parameter {rest!r}", at)
        return key, rest == "true"
    if code == "a":
        fields = rest.split(" ")
        if len(fields) != 3:
            reader.fail(f"array parameter needs dtype, shape, hex: {rest!r}", at)
        dtype_name, shape_tok, hexdata = fields
        shape = _parse_shape(shape_tok, reader, at)
        try:
            dtype = np.dtype(dtype_name)
            raw = bytes.fromhex(hexdata)
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        except (TypeError, ValueError) as e:
            reader.fail(f"bad array parameter: {e}", at)
        return key, arr
    if code == "g":
        return key, _read_graph(reader)
    reader.fail(f"unknown parameter type code {code!r}", at)


def _read_graph(reader: _Reader) -> Graph:
    from .trace import GraphBuilder

    at = reader.pos
    magic = reader.record()
    if magic != MAGIC:
        reader.fail(f"bad header {magic!r}, expected {MAGIC!r}", at)

    def one_int(parts: list[str], what: str, at_: int) -> int:
        if len(parts) != 1 or not parts[0].lstrip("-").isdigit():
            reader.fail(f"bad {what} record", at_)
        return int(parts[0])

    at = reader.pos
    n = one_int(reader.expect("clients"), "clients", at)
    at = reader.pos
    n_inputs = one_int(reader.expect("inputs"), "inputs", at)
    builder = GraphBuilder(n)
    env: list[Var] = []
    for _ in range(n_inputs):
        at = reader.pos
        parts = reader.expect("in")
        if len(parts) != 3:
            reader.fail("input record needs dtype, shape, placement", at)
        try:
            dtype = dtype_from_name(parts[0])
        except Exception as e:
            reader.fail(str(e), at)
        shape = _parse_shape(parts[1], reader, at)
        placement = _parse_placement(parts[2], reader, at)
        env.append(builder.add_input(AbstractValue(shape, dtype, placement)))
    at = reader.pos
    n_eqs = one_int(reader.expect("equations"), "equations", at)
    for _ in range(n_eqs):
        at = reader.pos
        parts = reader.expect("eq")
        if len(parts) != 4:
            reader.fail("equation record needs primitive, inputs, outputs, params", at)
        prim, in_tok, n_out_tok, n_par_tok = parts
        try:
            primitive_def(prim)
        except GraphError as e:
            reader.fail(str(e), at)
        if not n_out_tok.isdigit() or not n_par_tok.isdigit():
            reader.fail("bad equation record counts", at)
        try:
            in_ids = [] if in_tok == "-" else [int(t) for t in in_tok.split(",")]
        except ValueError:
            reader.fail(f"bad input references {in_tok!r}", at)
        for i in in_ids:
            if not 0 <= i < len(env):
                reader.fail(f"input reference {i} is out of range", at)
        params = {}
        for _ in range(int(n_par_tok)):
            key, value = _parse_param(reader)
            params[key] = value
        try:
            outs = builder.emit(prim, [env[i] for i in in_ids], params)
        except Exception as e:
            reader.fail(f"invalid equation: {e}", at)
        if len(outs) != int(n_out_tok):
            reader.fail(
                f"equation declares {n_out_tok} outputs, primitive produced "
                f"{len(outs)}",
                at,
            )
        env.extend(outs)
    at = reader.pos
    parts = reader.expect("ret")
    if len(parts) != 1:
        reader.fail("bad return record", at)
    try:
        ret_ids = [] if parts[0] == "-" else [int(t) for t in parts[0].split(",")]
    except ValueError:
        reader.fail(f"bad return references {parts[0]!r}", at)
    for i in ret_ids:
        if not 0 <= i < len(env):
            reader.fail(f"return reference {i} is out of range", at)
    reader.expect("end")
    return builder.build([env[i] for i in ret_ids])


def parse_canonical(data: bytes) -> Graph:
    reader = _Reader(data)
    g = _read_graph(reader)
    if not reader.done:
        reader.fail("trailing data after graph")
    validate_graph(g)
    return g


# ---------------------------------------------------------------------------
# file helpers and communication summary

def save_graph(g: Graph, path: str) -> None:
    if str(path).endswith(".txt"):
        with open(path, "w", encoding="utf-8") as f:
            f.write(serialize_text(g) + "\n")
    else:
        with open(path, "wb") as f:
            f.write(serialize_canonical(g))


def load_graph(path: str) -> Graph:
    if str(path).endswith(".txt"):
        raise ParseError("the text form is write-only; load the canonical form", 0)
    with open(path, "rb") as f:
        return parse_canonical(f.read())


def comm_summary(g: Graph) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """(primitive, operand shape) for each communication step, in order."""
    out = []
    for eq in g.equations:
        if is_comm(eq.primitive):
            out.append((eq.primitive, eq.inputs[0].aval.shape))
    return tuple(out)


def comm_names(g: Graph) -> tuple[str, ...]:
    return tuple(name for name, _ in comm_summary(g))
