"""Facade signature + Args-docstring extraction into a flattened
function-calling schema.

Supported parameter kinds are the native transport types plus
``json_string`` for anything structured; nested object kinds never appear.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field

KINDS = (
    "string",
    "integer",
    "number",
    "boolean",
    "array_integer",
    "array_string",
    "json_string",
)

_JSON_MENTION_RE = re.compile(r"\bJSON\b", re.I)


class ExtractError(ValueError):
    """Facade code falls outside the supported signature/docstring grammar."""


@dataclass
class SchemaParam:
    name: str
    kind: str
    required: bool
    description: str = ""
    default: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "required": self.required,
            "description": self.description,
            "default": self.default,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SchemaParam":
        return cls(
            name=str(data["name"]),
            kind=str(data["kind"]),
            required=bool(data["required"]),
            description=str(data.get("description", "")),
            default=data.get("default"),
        )


@dataclass
class ToolSchema:
    name: str
    description: str
    parameters: list[SchemaParam] = field(default_factory=list)

    def __post_init__(self) -> None:
        names = [p.name for p in self.parameters]
        if len(names) != len(set(names)):
            raise ExtractError(f"schema {self.name}: duplicate parameter names")
        for p in self.parameters:
            if p.kind not in KINDS:
                raise ExtractError(f"schema {self.name}: unknown kind {p.kind!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "parameters": [p.to_dict() for p in self.parameters],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToolSchema":
        return cls(
            name=str(data["name"]),
            description=str(data.get("description", "")),
            parameters=[SchemaParam.from_dict(p) for p in data.get("parameters", [])],
        )

    def to_function_call_format(self) -> dict:
        """The JSON shape offered to the solver alongside retrieved tools."""
        json_type = {
            "string": "string",
            "integer": "integer",
            "number": "number",
            "boolean": "boolean",
            "array_integer": "array",
            "array_string": "array",
            "json_string": "string",
        }
        properties = {}
        required = []
        for p in self.parameters:
            prop: dict = {"type": json_type[p.kind], "description": p.description}
            if p.kind == "array_integer":
                prop["items"] = {"type": "integer"}
            elif p.kind == "array_string":
                prop["items"] = {"type": "string"}
            properties[p.name] = prop
            if p.required:
                required.append(p.name)
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": properties,
                "required": required,
            },
        }


@dataclass
class SigParam:
    name: str
    declared_type: str | None
    default: str | None
    has_default: bool


_TYPE_TABLE = {
    "str": "string",
    "string": "string",
    "int": "integer",
    "integer": "integer",
    "float": "number",
    "number": "number",
    "double": "number",
    "bool": "boolean",
    "boolean": "boolean",
    "list[int]": "array_integer",
    "list[integer]": "array_integer",
    "list[str]": "array_string",
    "list[string]": "array_string",
}


def normalize_type(text: str | None) -> str | None:
    """Map a declared/documented type word to a kind; None when unsupported."""
    if text is None:
        return None
    cleaned = text.strip().strip("`'\"").replace(" ", "").lower()
    return _TYPE_TABLE.get(cleaned)


def _single_function(code: str) -> ast.FunctionDef:
    try:
        module = ast.parse(code)
    except SyntaxError as exc:
        raise ExtractError(f"code does not parse: {exc.msg} (line {exc.lineno})") from exc
    except ValueError as exc:
        raise ExtractError(f"code does not parse: {exc}") from exc
    functions = [n for n in module.body if isinstance(n, ast.FunctionDef)]
    if not functions:
        raise ExtractError("no function definition found")
    if len(functions) > 1:
        names = ", ".join(f.name for f in functions)
        raise ExtractError(f"expected exactly one top-level function, found: {names}")
    return functions[0]


def parse_signature(code: str) -> tuple[str, list[SigParam]]:
    """Facade name and ordered parameters (multi-line signatures included)."""
    fn = _single_function(code)
    args = fn.args
    if args.vararg or args.kwarg:
        raise ExtractError(f"{fn.name}: *args/**kwargs are not supported in facades")
    ordered = list(args.posonlyargs) + list(args.args)
    defaults = list(args.defaults)
    padded: list[ast.expr | None] = [None] * (len(ordered) - len(defaults)) + defaults
    params: list[SigParam] = []
    for arg, default in zip(ordered, padded):
        params.append(
            SigParam(
                name=arg.arg,
                declared_type=ast.unparse(arg.annotation) if arg.annotation else None,
                default=ast.unparse(default) if default is not None else None,
                has_default=default is not None,
            )
        )
    for arg, default in zip(args.kwonlyargs, args.kw_defaults):
        params.append(
            SigParam(
                name=arg.arg,
                declared_type=ast.unparse(arg.annotation) if arg.annotation else None,
                default=ast.unparse(default) if default is not None else None,
                has_default=default is not None,
            )
        )
    names = [p.name for p in params]
    if len(names) != len(set(names)):
        raise ExtractError(f"{fn.name}: duplicate parameter names")
    return fn.name, params


_ARGS_HEADER_RE = re.compile(r"^\s*Args\s*:\s*$", re.M)
_SECTION_HEADER_RE = re.compile(
    r"^\s*(Returns|Raises|Yields|Examples|Example|Notes|Note|Attributes)\s*:\s*$"
)
_ARG_ENTRY_RE = re.compile(
    r"^\s*-?\s*(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*"
    r"(?:\((?P<type>[^)]+)\))?\s*:\s*(?P<desc>.*)$"
)


def parse_args_docs(code: str) -> tuple[dict[str, dict], list[str]]:
    """Per-parameter type hints and descriptions from the Args section.

    All three entry forms are accepted: ``name (Type): desc``,
    ``name: desc`` and ``- name (Type): desc``. Continuation lines extend
    the previous entry's description. Type words are normalized to kinds;
    anything outside the supported table becomes json_string with the
    description preserved.
    """
    fn = _single_function(code)
    doc = ast.get_docstring(fn)
    if not doc:
        return {}, ["no docstring on facade function"]
    header = _ARGS_HEADER_RE.search(doc)
    if header is None:
        return {}, ["no Args section in facade docstring"]
    out: dict[str, dict] = {}
    warnings: list[str] = []
    current: str | None = None
    for line in doc[header.end() :].splitlines():
        if not line.strip():
            continue
        if _SECTION_HEADER_RE.match(line):
            break
        entry = _ARG_ENTRY_RE.match(line)
        if entry:
            name = entry.group("name")
            if name in out:
                warnings.append(f"duplicate Args entry for {name}; keeping the first")
                current = None
                continue
            raw_type = entry.group("type")
            if raw_type is None:
                hint = None
            else:
                hint = normalize_type(raw_type) or "json_string"
            out[name] = {
                "type_hint": hint,
                "description": entry.group("desc").strip(),
            }
            current = name
        elif current is not None:
            out[current]["description"] = (
                out[current]["description"] + " " + line.strip()
            ).strip()
    if not out:
        warnings.append("Args section holds no parsable entries")
    return out, warnings


def _merge_kind(
    param: SigParam, docs_entry: dict | None, facade: str
) -> tuple[str, str]:
    """Kind and description for one parameter.

    Precedence: docs type, then declared type, then json_string. Two
    recognized primitive kinds that disagree are a hard conflict. A string
    whose description announces JSON content is a json_string.
    """
    docs_kind = docs_entry.get("type_hint") if docs_entry else None
    description = (docs_entry or {}).get("description", "")
    decl_kind = normalize_type(param.declared_type)
    if param.declared_type is not None and decl_kind is None:
        decl_kind = "json_string"

    if (
        docs_kind
        and decl_kind
        and docs_kind != decl_kind
        and "json_string" not in (docs_kind, decl_kind)
    ):
        raise ExtractError(
            f"{facade}.{param.name}: docs say {docs_kind}, signature says {decl_kind}"
        )
    kind = docs_kind or decl_kind or "json_string"
    if kind == "string" and _JSON_MENTION_RE.search(description):
        kind = "json_string"
    if kind == "json_string" and not _JSON_MENTION_RE.search(description):
        # keep the schema self-describing: a json_string must document its shape
        description = ("Must be a valid JSON value. " + description).strip()
    return kind, description


def first_doc_paragraph(code: str) -> str:
    fn = _single_function(code)
    doc = ast.get_docstring(fn)
    if not doc:
        return ""
    return doc.strip().split("\n\n", 1)[0].replace("\n", " ").strip()


def build_schema(aggregated) -> ToolSchema:
    """Compose signature and Args docs into the retrievable schema."""
    facade_name, sig_params = parse_signature(aggregated.facade_code)
    docs, _warnings = parse_args_docs(aggregated.facade_code)
    description = first_doc_paragraph(aggregated.facade_code) or aggregated.description
    parameters: list[SchemaParam] = []
    for param in sig_params:
        kind, description_text = _merge_kind(param, docs.get(param.name), facade_name)
        parameters.append(
            SchemaParam(
                name=param.name,
                kind=kind,
                required=not param.has_default,
                description=description_text,
                default=param.default,
            )
        )
    return ToolSchema(name=facade_name, description=description, parameters=parameters)


def example_value(kind: str):
    """A synthetic argument accepted by the invocation transport for ``kind``."""
    return {
        "string": "example",
        "integer": 3,
        "number": 1.5,
        "boolean": True,
        "array_integer": [1, 2, 3],
        "array_string": ["a", "b"],
        "json_string": "{\"key\": [1, 2]}",
    }[kind]


@dataclass
class CatalogEntry:
    tool_id: str
    schema: ToolSchema

    def to_dict(self) -> dict:
        out = {"tool_id": self.tool_id}
        out.update(self.schema.to_dict())
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CatalogEntry":
        return cls(tool_id=str(data["tool_id"]), schema=ToolSchema.from_dict(data))


def catalog_to_json(entries: list[CatalogEntry]) -> str:
    """Catalog file body; key order is fixed so rebuilds are byte-identical."""
    ordered = sorted(entries, key=lambda e: e.tool_id)
    return json.dumps(
        [e.to_dict() for e in ordered], indent=2, ensure_ascii=False
    ) + "\n"


def catalog_from_json(text: str) -> list[CatalogEntry]:
    return [CatalogEntry.from_dict(item) for item in json.loads(text)]
