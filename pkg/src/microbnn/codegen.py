"""Standalone C source generation for trained networks.

The emitted header/source pair is self-contained: the inference runtime is
inlined into the source, parameters live in const arrays, and the only
include is <stdint.h> (plus <math.h> when raw batch-norm mode is selected
for auditing).  The text is a pure function of the model bytes and the
options, so regenerating the same model yields byte-identical files.

The source is assembled from a template whose ``@SLOT_NAME@`` placeholders
are each filled exactly once; :func:`instantiate` enforces that invariant
so a template edit that drops or duplicates a slot fails loudly instead of
producing a file that silently compiles the wrong thing.
"""

from __future__ import annotations

import hashlib
import os
import re
import shlex
import shutil
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import memory
from . import model as m
from .bitops import BitTensor
from .errors import CodegenError, TemplateError, ValidationError
from .inference import InputTensor, network_forward

__all__ = [
    "CodegenOptions",
    "GeneratedCode",
    "TemplateSlot",
    "MODEL_TEMPLATE_SLOTS",
    "instantiate",
    "generate",
    "emit_test_vectors",
    "runtime_source",
    "model_template",
    "find_c_compiler",
]

_SLOT_RE = re.compile(r"@([A-Z][A-Z0-9_]*)@")

# A prefix lands in identifiers and macro names, so C keywords are out.
_C_KEYWORDS = frozenset(
    """auto break case char const continue default do double else enum
    extern float for goto if inline int long register restrict return short
    signed sizeof static struct switch typedef union unsigned void volatile
    while""".split()
)

_VARIANT_MACROS = {
    "fc": "EBNN_VARIANT_FC",
    "conv": "EBNN_VARIANT_CONV",
    "convpool": "EBNN_VARIANT_CONV_POOL",
}


@dataclass(frozen=True)
class TemplateSlot:
    """One named hole in the source template.

    ``required`` slots always receive generated text; the rest may be
    filled with an empty string when the corresponding feature is off
    (they must still be *filled* -- a slot is never left in the output).
    """

    name: str
    purpose: str
    required: bool = True


MODEL_TEMPLATE_SLOTS: tuple[TemplateSlot, ...] = (
    TemplateSlot("GENERATOR_NOTE", "provenance comment with the model digest"),
    TemplateSlot("HEADER_NAME", "file name of the companion header"),
    TemplateSlot("RUNTIME_SOURCE", "inlined inference runtime"),
    TemplateSlot("MODEL_DATA", "weight, threshold and batch-norm arrays"),
    TemplateSlot("BLOCK_TABLE", "ebnn_block descriptor per block"),
    TemplateSlot("ARENA_STORAGE", "working-storage constants and buffer"),
    TemplateSlot("PREDICT_BODY", "the exported predict function"),
    TemplateSlot("TEST_VECTORS", "embedded self-test vectors", required=False),
    TemplateSlot("SELF_TEST_MAIN", "self-test runner and main", required=False),
)


@dataclass(frozen=True)
class CodegenOptions:
    """Knobs for :func:`generate`.

    prefix          names every emitted symbol and macro; must be a valid
                    C identifier.
    emit_folded_bn  store per-channel thresholds (default); when off, raw
                    batch-norm parameters are kept and the threshold is
                    recomputed on device, which requires sqrtf and exists
                    for auditing the fold.
    static_arena    reserve working storage inside the generated file;
                    when off, predict takes the arena as a third argument
                    so the caller places it.
    test_vectors    inputs embedded (with per-block expected bits, scores
                    and labels) as a self-test compiled under
                    -DEBNN_SELF_TEST; empty means no self-test section.
    """

    prefix: str = "model"
    emit_folded_bn: bool = True
    static_arena: bool = True
    test_vectors: tuple = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", self.prefix):
            raise ValidationError(
                f"prefix {self.prefix!r} is not a valid C identifier")
        if self.prefix in _C_KEYWORDS:
            raise ValidationError(f"prefix {self.prefix!r} is a C keyword")
        object.__setattr__(self, "test_vectors", tuple(self.test_vectors))


@dataclass(frozen=True)
class GeneratedCode:
    """The emitted file pair, named after the prefix."""

    header_name: str
    header_text: str
    source_name: str
    source_text: str

    def write(self, directory) -> tuple[Path, Path]:
        out = Path(directory)
        header = out / self.header_name
        source = out / self.source_name
        header.write_text(self.header_text)
        source.write_text(self.source_text)
        return header, source


def _data_text(name: str) -> str:
    return (resources.files(__package__) / "c_runtime" / name).read_text()


def runtime_source() -> str:
    """The inference runtime that gets inlined into generated sources."""
    return _data_text("ebnn_runtime.h")


def model_template() -> str:
    """The source template with one @SLOT_NAME@ per section."""
    return _data_text("model_template.c.in")


def instantiate(template: str, values: Mapping[str, str]) -> str:
    """Fill every ``@SLOT_NAME@`` in ``template`` exactly once.

    Raises TemplateError naming the offending slot when one is missing
    from ``values``, appears more than once in the template (which would
    mean one value substituted twice), or when ``values`` names a slot
    the template does not have.
    """
    counts = Counter(_SLOT_RE.findall(template))
    for name, n in sorted(counts.items()):
        if n > 1:
            raise TemplateError(
                f"slot @{name}@ appears {n} times in the template; "
                "each slot is substituted exactly once")
    unknown = sorted(set(values) - set(counts))
    if unknown:
        raise TemplateError(f"template has no slot named @{unknown[0]}@")
    missing = sorted(set(counts) - set(values))
    if missing:
        raise TemplateError(f"no value for slot @{missing[0]}@")
    out = _SLOT_RE.sub(lambda mo: values[mo.group(1)], template)
    leftover = _SLOT_RE.search(out)
    if leftover:  # a substituted value smuggled in a placeholder
        raise TemplateError(
            f"substituted text introduced placeholder @{leftover.group(1)}@")
    return out


def _c_float(value) -> str:
    """Hex float literal: exact, locale-proof, reparses to the same bits."""
    return float(np.float32(value)).hex() + "F"


def _wrap(items: list[str], per_line: int, indent: str = "    ") -> str:
    lines = []
    for i in range(0, len(items), per_line):
        lines.append(indent + " ".join(x + "," for x in items[i:i + per_line]))
    return "\n".join(lines)


def _u8_array(name: str, data: bytes, note: str = "") -> str:
    if not data:
        raise CodegenError(f"array {name} would be empty")
    suffix = f" /* {note} */" if note else ""
    body = _wrap([f"0x{b:02X}" for b in data], 12)
    return (f"static const uint8_t {name}[{len(data)}] = {{{suffix}\n"
            f"{body}\n}};")


def _f32_array(name: str, values: list, note: str = "") -> str:
    if not values:
        raise CodegenError(f"array {name} would be empty")
    suffix = f" /* {note} */" if note else ""
    body = _wrap([_c_float(v) for v in values], 4)
    return (f"static const float {name}[{len(values)}] = {{{suffix}\n"
            f"{body}\n}};")


def _block_geometry(net: m.Network) -> list[dict]:
    """Per-block descriptor fields, with input shapes chained through."""
    shapes = m.network_shapes(net)
    rows = []
    cur = net.input_spec.shape
    for i, block in enumerate(net.blocks):
        out_c, out_h, out_w = shapes[i]
        row = {
            "variant": _VARIANT_MACROS[m.variant_name(block)],
            "real_in": 1 if i == 0 and net.input_spec.kind == "real" else 0,
            "in_c": cur[0], "in_h": cur[1], "in_w": cur[2],
            "out_c": out_c, "out_h": out_h, "out_w": out_w,
            "kernel": 0, "stride": 0, "pool": 0, "pool_stride": 0,
            "in_length": 0,
        }
        if isinstance(block, m.FusedFC):
            row["in_length"] = block.in_length
        else:
            row["kernel"] = block.kernel
            row["stride"] = block.stride
            if isinstance(block, m.FusedConvPool):
                row["pool"] = block.pool_size
                row["pool_stride"] = block.pool_stride
            else:
                # a plain convolution is a pooled one with 1x1 windows
                row["pool"] = 1
                row["pool_stride"] = 1
        rows.append(row)
        cur = shapes[i]
    return rows


def _model_data(net: m.Network, opts: CodegenOptions) -> tuple[str, list[dict]]:
    """Const arrays for every block, plus the symbols the table refers to."""
    p = opts.prefix
    chunks = []
    symbols = []
    shapes = m.network_shapes(net)
    cur = net.input_spec.shape
    for i, block in enumerate(net.blocks):
        name = m.variant_name(block)
        c, h, w = shapes[i]
        chunks.append(f"/* block {i}: {name} "
                      f"{cur[0]}x{cur[1]}x{cur[2]} -> {c}x{h}x{w} */")
        sym = {"weights": f"{p}_w{i}", "tau": "0", "flip": "0", "bn": "0"}
        chunks.append(_u8_array(sym["weights"], block.weights.tobytes()))
        if opts.emit_folded_bn:
            folds = [m.fold_bn(bn) for bn in block.bn]
            sym["tau"] = f"{p}_tau{i}"
            sym["flip"] = f"{p}_flip{i}"
            chunks.append(_f32_array(sym["tau"],
                                     [f.threshold for f in folds]))
            chunks.append(_u8_array(sym["flip"],
                                    bytes(1 if f.flip else 0 for f in folds)))
        else:
            sym["bn"] = f"{p}_bn{i}"
            raw = []
            for bn in block.bn:
                raw.extend((bn.gamma, bn.beta, bn.mean, bn.var, bn.epsilon))
            chunks.append(_f32_array(sym["bn"], raw,
                                     "gamma, beta, mean, var, eps"))
        symbols.append(sym)
        cur = shapes[i]
    return "\n\n".join(chunks), symbols


def _block_table(net: m.Network, opts: CodegenOptions,
                 symbols: list[dict]) -> str:
    p = opts.prefix
    rows = _block_geometry(net)
    entries = []
    for row, sym in zip(rows, symbols):
        entries.append(
            "    {\n"
            f"        .variant = {row['variant']},\n"
            f"        .real_in = {row['real_in']},\n"
            f"        .in_c = {row['in_c']}, .in_h = {row['in_h']}, "
            f".in_w = {row['in_w']},\n"
            f"        .out_c = {row['out_c']}, .out_h = {row['out_h']}, "
            f".out_w = {row['out_w']},\n"
            f"        .kernel = {row['kernel']}, .stride = {row['stride']}, "
            f".pool = {row['pool']}, .pool_stride = {row['pool_stride']},\n"
            f"        .in_length = {row['in_length']},\n"
            f"        .weights = {sym['weights']},\n"
            f"        .tau = {sym['tau']},\n"
            f"        .flip = {sym['flip']},\n"
            f"        .bn = {sym['bn']},\n"
            "    },"
        )
    n = len(net.blocks)
    return (f"static const ebnn_block {p}_blocks[{n}] = {{\n"
            + "\n".join(entries) + "\n};")


def _input_decl(net: m.Network, up: str) -> tuple[str, str]:
    """(parameter declaration, layout comment) for the predict input."""
    if net.input_spec.kind == "real":
        return (f"const float input[{up}_INPUT_LENGTH]",
                "channel-major floats, length " + f"{up}_INPUT_LENGTH")
    return (f"const uint8_t input[{up}_INPUT_BYTES]",
            "packed rows, LSB first, pad bits zero, "
            f"{up}_INPUT_BYTES bytes")


def emit_test_vectors(net: m.Network, samples: Sequence,
                      prefix: str = "model") -> str:
    """C arrays holding inputs, per-block expected bits, scores and labels.

    The section compiles only under -DEBNN_SELF_TEST.  An empty sample
    list yields an empty string (no section at all).
    """
    if not samples:
        return ""
    up = prefix.upper()
    real = net.input_spec.kind == "real"
    runs = [network_forward(net, s, record_intermediates=True)
            for s in samples]
    n = len(samples)

    if real:
        per = samples[0].data.size
        in_rows = [_wrap([_c_float(v) for v in s.data.reshape(-1)], 4,
                         "        ") for s in samples]
        inputs = (f"static const float {prefix}_tv_inputs[{n}][{per}] = {{\n"
                  + "\n".join("    {\n" + row + "\n    }," for row in in_rows)
                  + "\n};")
    else:
        per = samples[0].nbytes
        in_rows = [_wrap([f"0x{b:02X}" for b in s.tobytes()], 12, "        ")
                   for s in samples]
        inputs = (f"static const uint8_t {prefix}_tv_inputs[{n}][{per}] "
                  "= {\n"
                  + "\n".join("    {\n" + row + "\n    }," for row in in_rows)
                  + "\n};")

    bits_per = sum(t.nbytes for t in runs[0].intermediates)
    bit_rows = [_wrap([f"0x{b:02X}"
                       for t in r.intermediates for b in t.tobytes()], 12,
                      "        ") for r in runs]
    bits = (f"static const uint8_t {prefix}_tv_bits[{n}][{bits_per}] = {{\n"
            + "\n".join("    {\n" + row + "\n    }," for row in bit_rows)
            + "\n};")

    classes = net.classes
    score_rows = [_wrap([_c_float(v) for v in r.scores], 4, "        ")
                  for r in runs]
    scores = (f"static const float {prefix}_tv_scores[{n}][{classes}] = {{\n"
              + "\n".join("    {\n" + row + "\n    }," for row in score_rows)
              + "\n};")

    labels = (f"static const uint8_t {prefix}_tv_labels[{n}] = {{\n"
              + _wrap([str(r.label) for r in runs], 12) + "\n};")

    return "\n\n".join([
        "#ifdef EBNN_SELF_TEST",
        f"#define {up}_TEST_VECTOR_COUNT {n}",
        inputs, bits, scores, labels,
        "#endif /* EBNN_SELF_TEST */",
    ])


def _self_test_main(net: m.Network, opts: CodegenOptions) -> str:
    p, up = opts.prefix, opts.prefix.upper()
    n = len(net.blocks)
    return f"""#ifdef EBNN_SELF_TEST

#include <stdio.h>

int {p}_self_test(void)
{{
    static uint8_t arena[{up}_ARENA_BYTES];
    float scores[{up}_CLASSES];
    int failures = 0;
    int v;
    for (v = 0; v < {up}_TEST_VECTOR_COUNT; v++) {{
        int rc = ebnn_check_vector({p}_blocks, {n}u, {p}_tv_inputs[v],
                                   arena, {up}_HALF_BYTES, scores,
                                   {up}_CLASSES, {p}_tv_bits[v],
                                   {p}_tv_scores[v], {p}_tv_labels[v]);
        if (rc == 0) {{
            printf("vector %d: PASS\\n", v);
        }} else {{
            printf("vector %d: FAIL (code %d)\\n", v, rc);
            failures++;
        }}
    }}
    return failures;
}}

int main(void)
{{
    return {p}_self_test() == 0 ? 0 : 1;
}}

#endif /* EBNN_SELF_TEST */"""


def _header_text(net: m.Network, opts: CodegenOptions, report,
                 note: str) -> str:
    p, up = opts.prefix, opts.prefix.upper()
    spec = net.input_spec
    param, layout = _input_decl(net, up)
    lines = [
        note,
        f"#ifndef {up}_H",
        f"#define {up}_H",
        "",
        "#include <stdint.h>",
        "",
        "#ifdef __cplusplus",
        'extern "C" {',
        "#endif",
        "",
        f"#define {up}_CLASSES {net.classes}",
        f"#define {up}_BLOCK_COUNT {len(net.blocks)}",
        f"#define {up}_INPUT_CHANNELS {spec.channels}",
        f"#define {up}_INPUT_HEIGHT {spec.height}",
        f"#define {up}_INPUT_WIDTH {spec.width}",
    ]
    if spec.kind == "real":
        lines.append(f"#define {up}_INPUT_LENGTH "
                     f"{spec.channels * spec.height * spec.width}")
    else:
        lines.append(f"#define {up}_INPUT_BYTES "
                     f"{memory.input_buffer_bytes(spec)}")
    lines += [
        "",
        "/* Two activation buffers plus the four-byte accumulator slot. */",
        f"#define {up}_ARENA_BYTES {2 * report.T + 4}",
        "",
        f"/* input: {layout}.",
        f" * scores_out: {net.classes} floats, one pre-threshold score per",
        " * class.  Returns the argmax label, lowest index on ties.",
    ]
    if opts.static_arena:
        lines += [
            " * Working storage is a file-scope buffer, so calls are not",
            " * reentrant.",
            " */",
            f"uint8_t {p}_predict({param}, float *scores_out);",
        ]
    else:
        lines += [
            f" * arena: {up}_ARENA_BYTES bytes of caller-placed working",
            " * storage; distinct arenas make concurrent calls safe.",
            " */",
            f"uint8_t {p}_predict({param}, float *scores_out, "
            "uint8_t *arena);",
        ]
    if opts.test_vectors:
        lines += [
            "",
            "#ifdef EBNN_SELF_TEST",
            "/* Replays the embedded vectors; returns the failure count. */",
            f"int {p}_self_test(void);",
            "#endif",
        ]
    lines += [
        "",
        "#ifdef __cplusplus",
        "}",
        "#endif",
        "",
        f"#endif /* {up}_H */",
        "",
    ]
    return "\n".join(lines)


def _predict_body(net: m.Network, opts: CodegenOptions) -> str:
    p, up = opts.prefix, opts.prefix.upper()
    param, _ = _input_decl(net, up)
    n = len(net.blocks)
    if opts.static_arena:
        return (f"uint8_t {p}_predict({param}, float *scores_out)\n"
                "{\n"
                f"    return ebnn_predict_impl({p}_blocks, {n}u, input, "
                f"{p}_arena,\n"
                f"                             {up}_HALF_BYTES, scores_out, "
                f"{up}_CLASSES, 0, 0);\n"
                "}")
    return (f"uint8_t {p}_predict({param}, float *scores_out, "
            "uint8_t *arena)\n"
            "{\n"
            f"    return ebnn_predict_impl({p}_blocks, {n}u, input, arena,\n"
            f"                             {up}_HALF_BYTES, scores_out, "
            f"{up}_CLASSES, 0, 0);\n"
            "}")


def generate(net: m.Network, opts: CodegenOptions | None = None) -> GeneratedCode:
    """Emit a standalone C header/source pair for ``net``.

    The generated predict matches the Python engine bit for bit: same
    packed layouts, same iteration order, same float rounding points, and
    exactly two activation buffers plus one four-byte accumulator slot of
    working storage.
    """
    opts = opts or CodegenOptions()
    m.ensure_valid(net)
    for block in net.blocks:
        if m.variant_name(block) not in _VARIANT_MACROS:
            raise CodegenError(
                f"no C executor for block type {type(block).__name__}")
    report = memory.memory_report(net)
    digest = hashlib.sha256(m.serialize(net)).hexdigest()[:16]
    p, up = opts.prefix, opts.prefix.upper()

    mode = []
    mode.append("folded thresholds" if opts.emit_folded_bn else "raw batch norm")
    mode.append("static arena" if opts.static_arena else "caller arena")
    if opts.test_vectors:
        mode.append(f"{len(opts.test_vectors)} self-test vectors")
    note = (f"/*\n * Binarized network inference, generated code.\n"
            f" * Model digest {digest}; {'; '.join(mode)}.\n"
            f" * Regenerating the same model with the same options\n"
            f" * reproduces this file byte for byte.  Do not edit.\n */")

    data_text, symbols = _model_data(net, opts)
    arena_lines = [f"#define {up}_HALF_BYTES {report.T}"]
    if opts.static_arena:
        arena_lines.append(f"static uint8_t {p}_arena[{up}_ARENA_BYTES];")
    values = {
        "GENERATOR_NOTE": note,
        "HEADER_NAME": f"{p}.h",
        "RUNTIME_SOURCE": runtime_source().rstrip("\n"),
        "MODEL_DATA": data_text,
        "BLOCK_TABLE": _block_table(net, opts, symbols),
        "ARENA_STORAGE": "\n".join(arena_lines),
        "PREDICT_BODY": _predict_body(net, opts),
        "TEST_VECTORS": emit_test_vectors(net, opts.test_vectors, p),
        "SELF_TEST_MAIN": (_self_test_main(net, opts)
                           if opts.test_vectors else ""),
    }
    source = instantiate(model_template(), values)
    # disabled sections leave blank runs behind; collapse for stable text
    source = re.sub(r"\n{3,}", "\n\n", source).rstrip("\n") + "\n"
    header = _header_text(net, opts, report, note)
    return GeneratedCode(f"{p}.h", header, f"{p}.c", source)


def find_c_compiler() -> list[str] | None:
    """Compiler argv from $MICROBNN_CC or $CC, else cc/gcc/clang on PATH.

    Returns None when nothing usable is found so callers can skip
    compilation gracefully.
    """
    for var in ("MICROBNN_CC", "CC"):
        value = os.environ.get(var, "").strip()
        if value:
            argv = shlex.split(value)
            exe = shutil.which(argv[0])
            return [exe, *argv[1:]] if exe else None
    for name in ("cc", "gcc", "clang"):
        exe = shutil.which(name)
        if exe:
            return [exe]
    return None
