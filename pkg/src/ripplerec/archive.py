"""Model archive: a directory of vocabularies, little-endian binary blobs and a hashed manifest.

Layout::

    manifest.json   format version, config snapshot, vocab sizes, per-file and content hashes
    entities.tsv    entity vocabulary
    relations.tsv   relation vocabulary
    E.bin, R.bin    entity embeddings and relation matrices (float32)
    profiles.bin    ripple-set store
    simindex.bin    similarity index (optional)
    encoder.bin     content encoder (optional)
    popularity.tsv  training click counts for the popularity fallback
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .artifacts import ModelArtifacts
from .coldstart import EncoderParams, SimilarityIndex
from .kg import KnowledgeGraph, ProfileStore, read_vocab
from .model import ModelConfig, ModelParameters

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
BLOB_MAGIC = b"RRB1"
MANIFEST = "manifest.json"

_DTYPES = {b"f": "<f4", b"d": "<f8", b"i": "<i4", b"q": "<i8", b"u": "u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class ArchiveError(Exception):
    pass


class ArchiveCorruptError(ArchiveError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


def encode_blob(arrays: dict[str, np.ndarray]) -> bytes:
    """Named arrays with explicit dtype and shape headers, data little-endian."""
    buf = io.BytesIO()
    buf.write(BLOB_MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        code = _CODES.get(np.dtype(dtype))
        if code is None:
            raise ArchiveError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + code)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return buf.getvalue()


def decode_blob(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != BLOB_MAGIC:
        raise ArchiveCorruptError("bad blob magic")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode()
            pos += n
            dtype = np.dtype(_DTYPES[data[pos:pos + 1]])
            pos += 1
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(data):
                raise ArchiveCorruptError(f"array {name!r} truncated")
            out[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize,
                                      offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as err:
        raise ArchiveCorruptError(f"malformed blob: {err}") from None
    if pos != len(data):
        raise ArchiveCorruptError("trailing bytes in blob")
    return out


def _strings(names) -> np.ndarray:
    return np.frombuffer("\n".join(names).encode(), dtype=np.uint8)


def _unstrings(arr: np.ndarray) -> list[str]:
    text = arr.tobytes().decode()
    return text.split("\n") if text else []


def _vocab_bytes(names, column) -> bytes:
    buf = io.StringIO()
    buf.write(f"{column}\tid\n")
    for i, n in enumerate(names):
        buf.write(f"{n}\t{i}\n")
    return buf.getvalue().encode()


def content_hash(files: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(name.encode() + b"\0" + hashlib.sha256(files[name]).digest())
    return h.hexdigest()


def archive_files(art: ModelArtifacts, extra: dict | None = None) -> dict[str, bytes]:
    """Serialized archive contents keyed by file name, manifest included."""
    files = {
        "entities.tsv": _vocab_bytes(art.kg.entities, "entity"),
        "relations.tsv": _vocab_bytes(art.kg.relations, "relation"),
        "E.bin": encode_blob({"E": art.params.entity_emb.astype(np.float32)}),
        "R.bin": encode_blob({"R": art.params.relation_mat.astype(np.float32)}),
        "profiles.bin": encode_blob({
            "user_ids": _strings(art.profiles.user_ids),
            "heads": art.profiles.heads.astype(np.int32),
            "relations": art.profiles.relations.astype(np.int32),
            "tails": art.profiles.tails.astype(np.int32),
            "depth": art.profiles.depth.astype(np.int32),
            "unknown_items": art.profiles.unknown_items.astype(np.int32),
        }),
        "popularity.tsv": ("item_id\tclicks\n" + "".join(
            f"{i}\t{c}\n" for i, c in sorted(art.popularity.items()))).encode(),
    }
    if art.index is not None:
        files["simindex.bin"] = encode_blob({
            "item_ids": _strings(art.index.item_ids),
            "vectors": art.index.vectors.astype(np.float64),
            "entity_ids": art.index.entity_ids.astype(np.int64),
        })
    if art.encoder is not None:
        arrays = {}
        for i, (w, b) in enumerate(zip(art.encoder.weights, art.encoder.biases)):
            arrays[f"W{i}"] = w.astype(np.float64)
            arrays[f"b{i}"] = b.astype(np.float64)
        files["encoder.bin"] = encode_blob(arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": art.config.to_dict(),
        "strategy": art.strategy,
        "train_date": art.train_date,
        "vocab_sizes": {"entities": art.kg.n_entities, "relations": art.kg.n_relations},
        "n_users": len(art.profiles),
        "files": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
        "content_hash": content_hash(files),
    }
    if extra:
        manifest["extra"] = extra
    manifest["manifest_hash"] = _manifest_hash(manifest)
    files[MANIFEST] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    return files


def _manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def save_archive(art: ModelArtifacts, path: str | os.PathLike, extra: dict | None = None) -> str:
    """Write the archive directory; returns its content hash. Output is byte-stable."""
    files = archive_files(art, extra)
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        with open(d / name, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
    return json.loads(files[MANIFEST])["content_hash"]


def read_manifest(path: str | os.PathLike) -> dict:
    try:
        with open(Path(path) / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ArchiveError(f"no {MANIFEST} in {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ArchiveCorruptError(f"unreadable manifest: {err}") from None
    if not isinstance(manifest, dict):
        raise ArchiveCorruptError("manifest is not a JSON object")
    version = manifest.get("format_version")
    if version not in SUPPORTED_VERSIONS:
        raise ArchiveVersionError(
            f"unsupported archive format version {version}; supported versions: "
            + ", ".join(map(str, SUPPORTED_VERSIONS)))
    if manifest.get("manifest_hash") != _manifest_hash(manifest):
        raise ArchiveCorruptError("hash mismatch in manifest.json")
    return manifest


def load_archive(path: str | os.PathLike) -> ModelArtifacts:
    """Load and verify an archive. The returned graph carries vocabularies only, no triples."""
    d = Path(path)
    manifest = read_manifest(d)
    files = {}
    for name, digest in manifest["files"].items():
        try:
            data = (d / name).read_bytes()
        except FileNotFoundError:
            raise ArchiveCorruptError(f"missing archive file {name}") from None
        if hashlib.sha256(data).hexdigest() != digest:
            raise ArchiveCorruptError(f"hash mismatch in {name}")
        files[name] = data
    if content_hash(files) != manifest["content_hash"]:
        raise ArchiveCorruptError("content hash mismatch")

    entities = tuple(read_vocab(d / "entities.tsv"))
    relations = tuple(read_vocab(d / "relations.tsv"))
    kg = KnowledgeGraph(entities, relations, np.empty((0, 3), dtype=np.int64))
    params = ModelParameters(decode_blob(files["E.bin"])["E"], decode_blob(files["R.bin"])["R"])
    if params.entity_emb.shape[0] != len(entities) or params.relation_mat.shape[0] != len(relations):
        raise ArchiveCorruptError("parameter shapes disagree with vocabularies")
    p = decode_blob(files["profiles.bin"])
    profiles = ProfileStore(_unstrings(p["user_ids"]), p["heads"], p["relations"], p["tails"],
                            p["depth"], p["unknown_items"])
    popularity = {}
    for line in files["popularity.tsv"].decode().splitlines()[1:]:
        item, count = line.split("\t")
        popularity[item] = int(count)
    index = None
    if "simindex.bin" in files:
        s = decode_blob(files["simindex.bin"])
        index = SimilarityIndex(tuple(_unstrings(s["item_ids"])), s["vectors"], s["entity_ids"])
    encoder = None
    if "encoder.bin" in files:
        e = decode_blob(files["encoder.bin"])
        n = len(e) // 2
        encoder = EncoderParams([e[f"W{i}"] for i in range(n)], [e[f"b{i}"] for i in range(n)])
    config = ModelConfig(**manifest["config"])
    return ModelArtifacts(config, params, kg, profiles, popularity, index, encoder,
                          manifest.get("strategy", "similarity"), manifest.get("train_date"), manifest)
