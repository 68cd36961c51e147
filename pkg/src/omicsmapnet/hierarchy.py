"""Functional-annotation hierarchy: BRITE-style htext parsing and tree surgery.

The tree has a root at level 0, category nodes at levels 1..3 and gene leaves
hanging off the level-3 categories, so a fully built tree has five layers.
A gene annotated under several categories owns one leaf per category.

The htext dialect understood here::

    # comment
    A Top level
    B  Second level
    C    Third level
    D      K00001  geneX; description

Lines start with a level letter (``A`` is depth 1, ``B`` depth 2, ...).
Childless lines at depth >= 4 whose first token looks like a KEGG id
(``K`` + digits) are gene leaves.  HTML tags in labels are stripped.
"""

import json
import re
import urllib.error
import urllib.parse
import urllib.request
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

from ._io import write_bytes_atomic
from .errors import (
    CacheCorrupt,
    MalformedLine,
    MissingSubFile,
    NetworkUnavailable,
    OrphanLine,
    UnknownCategory,
)

KEGG_GET_URL = "https://rest.kegg.jp/get/{resource_id}"
GENE_ID_RE = re.compile(r"^K\d+$")
LEVEL_LETTERS = "ABCDEFGH"
META_PREFIXES = ("#", "!", "+", "%")
CATEGORY_DEPTH = 3

_TAG_RE = re.compile(r"<[^>]*>")


@dataclass(frozen=True)
class GeneLeaf:
    kegg_id: str
    display_name: str = ""
    annotation_path: Tuple[str, ...] = ()


@dataclass
class HierarchyNode:
    label: str
    level: int = 0
    children: List["HierarchyNode"] = field(default_factory=list)
    genes: List[GeneLeaf] = field(default_factory=list)

    def iter_nodes(self) -> Iterator["HierarchyNode"]:
        """Pre-order traversal, self first."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def leaves(self) -> List[GeneLeaf]:
        """All gene leaves in layout (pre-order) order."""
        return [g for node in self.iter_nodes() for g in node.genes]

    def n_leaves(self) -> int:
        return sum(len(node.genes) for node in self.iter_nodes())

    def n_nodes(self) -> int:
        return sum(1 for _ in self.iter_nodes())

    def depth(self) -> int:
        """Number of layers including the root and gene leaves."""
        best = 0
        for node in self.iter_nodes():
            d = node.level + 1 + (1 if node.genes else 0)
            best = max(best, d)
        return best


HierarchyTree = HierarchyNode


# ---------------------------------------------------------------------------
# fetching

def cache_path(resource_id: str, cache_dir) -> Path:
    return Path(cache_dir) / urllib.parse.quote(resource_id, safe="")


def fetch_catalog(resource_id: str, cache_dir, url_template: str = KEGG_GET_URL,
                  timeout: float = 30.0) -> bytes:
    """Return the raw catalog text for ``resource_id``, downloading at most once.

    A cached payload is returned as-is and never rewritten.
    """
    path = cache_path(resource_id, cache_dir)
    if path.exists():
        payload = path.read_bytes()
        if not payload:
            raise CacheCorrupt(f"empty cache entry {path}")
        return payload

    url = url_template.format(resource_id=urllib.parse.quote(resource_id, safe=":"))
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            payload = resp.read()
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise NetworkUnavailable(f"cannot fetch {resource_id!r} from {url}: {exc}") from exc
    if not payload:
        raise NetworkUnavailable(f"empty response for {resource_id!r}")
    # another writer may have won the race; keep its (identical) bytes
    if not path.exists():
        write_bytes_atomic(path, payload)
    return payload


# ---------------------------------------------------------------------------
# parsing / serialization

def _clean_label(text: str) -> str:
    return _TAG_RE.sub("", text).strip()


def parse_htext(text, loose_ids: bool = False, root_label: str = "root") -> HierarchyTree:
    """Parse letter-prefixed hierarchy text into a tree.

    Raises MalformedLine for an unknown prefix and OrphanLine when a line is
    more than one level deeper than its predecessor.
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")

    root = HierarchyNode(label=root_label, level=0)
    stack = [root]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith(META_PREFIXES):
            continue
        letter = raw[0]
        if letter not in LEVEL_LETTERS:
            raise MalformedLine(f"line {lineno}: unknown prefix {letter!r}")
        depth = LEVEL_LETTERS.index(letter) + 1
        if depth > len(stack):
            raise OrphanLine(
                f"line {lineno}: level {letter} without a level "
                f"{LEVEL_LETTERS[depth - 2]} parent")
        label = _clean_label(raw[1:])
        if not label:
            raise MalformedLine(f"line {lineno}: empty label")
        del stack[depth:]
        node = HierarchyNode(label=label, level=depth)
        stack[-1].children.append(node)
        stack.append(node)

    _convert_gene_lines(root, loose_ids, (root.label,))
    return root


def _convert_gene_lines(node: HierarchyNode, loose: bool, path: Tuple[str, ...]) -> None:
    kept = []
    for child in node.children:
        if child.level >= 4 and not child.children and not child.genes:
            token, *rest = child.label.split(None, 1)
            if loose or GENE_ID_RE.match(token):
                node.genes.append(GeneLeaf(token, rest[0] if rest else "", path))
                continue
        kept.append(child)
        _convert_gene_lines(child, loose, path + (child.label,))
    node.children = kept


def to_htext(tree: HierarchyTree) -> str:
    """Serialize back to htext; the root itself is implicit."""
    lines = []

    def walk(node, depth):
        for child in node.children:
            lines.append(f"{LEVEL_LETTERS[depth]} {child.label}")
            walk(child, depth + 1)
        for gene in node.genes:
            name = f" {gene.display_name}" if gene.display_name else ""
            lines.append(f"{LEVEL_LETTERS[depth]} {gene.kegg_id}{name}")

    walk(tree, 0)
    return "\n".join(lines) + ("\n" if lines else "")


def to_json_obj(node: HierarchyNode) -> dict:
    return {
        "label": node.label,
        "children": [to_json_obj(c) for c in node.children],
        "genes": [{"id": g.kegg_id, "name": g.display_name} for g in node.genes],
    }


def from_json_obj(obj: dict) -> HierarchyTree:
    def build(o, level, path):
        node = HierarchyNode(label=o["label"], level=level)
        here = path + (node.label,)
        node.children = [build(c, level + 1, here) for c in o.get("children", [])]
        node.genes = [GeneLeaf(g["id"], g.get("name", ""), here) for g in o.get("genes", [])]
        return node

    return build(obj, 0, ())


def dumps_tree(tree: HierarchyTree) -> str:
    return json.dumps(to_json_obj(tree), indent=1, ensure_ascii=False) + "\n"


def loads_tree(text: str) -> HierarchyTree:
    return from_json_obj(json.loads(text))


def load_tree(path, loose_ids: bool = False) -> HierarchyTree:
    """Load a tree from a JSON file or an htext file (decided by content)."""
    raw = Path(path).read_bytes()
    if raw.lstrip().startswith(b"{"):
        return loads_tree(raw.decode("utf-8"))
    return parse_htext(raw, loose_ids=loose_ids)


# ---------------------------------------------------------------------------
# tree surgery

def relevel(node: HierarchyNode, level: int = 0, path: Tuple[str, ...] = ()) -> None:
    node.level = level
    here = path + (node.label,)
    node.genes = [GeneLeaf(g.kegg_id, g.display_name, here) for g in node.genes]
    for child in node.children:
        relevel(child, level + 1, here)


def _dedupe_genes(node: HierarchyNode) -> None:
    for n in node.iter_nodes():
        seen = set()
        unique = []
        for g in n.genes:
            if g.kegg_id not in seen:
                seen.add(g.kegg_id)
                unique.append(g)
        n.genes = unique


def truncate(tree: HierarchyTree, max_level: int = CATEGORY_DEPTH) -> HierarchyTree:
    """Fold categories deeper than ``max_level`` into their ancestor at that level.

    Folded genes keep their pre-order position; repeats of one gene inside the
    same surviving category collapse to the first occurrence.
    """
    out = deepcopy(tree)
    relevel(out)
    for node in out.iter_nodes():
        if node.level == max_level and node.children:
            gathered = list(node.genes)
            for desc in node.children:
                gathered.extend(desc.leaves())
            node.genes = gathered
            node.children = []
    relevel(out)
    _dedupe_genes(out)
    return out


def find_node(tree: HierarchyTree, label: str) -> Optional[HierarchyNode]:
    for node in tree.iter_nodes():
        if node.label == label:
            return node
    return None


def _sub_file_key(label: str, sub_files: Dict[str, HierarchyTree]) -> str:
    token = label.split()[0]
    if token in sub_files:
        return token
    if label in sub_files:
        return label
    raise MissingSubFile(f"no parsed hierarchy file for catalog entry {label!r}")


def build_annotation_tree(top_catalog: HierarchyTree, branch_label: str,
                          sub_files: Dict[str, HierarchyTree],
                          max_level: int = CATEGORY_DEPTH) -> HierarchyTree:
    """Graft per-file groupings under the catalog branch ``branch_label``.

    Each childless category in the branch names a hierarchy file (by its
    first token, e.g. ``ko01000``, or its full label).  The file's top-level
    groupings become that entry's children, and anything below
    ``max_level`` is folded upwards.
    """
    branch = find_node(top_catalog, branch_label)
    if branch is None:
        raise UnknownCategory(f"branch {branch_label!r} not in catalog")
    root = deepcopy(branch)
    root.genes = []

    def graft(node):
        for child in node.children:
            if child.children:
                graft(child)
                continue
            sub = sub_files[_sub_file_key(child.label, sub_files)]
            child.children = deepcopy(sub.children)
            child.genes = list(child.genes) + list(sub.genes)

    graft(root)
    return truncate(root, max_level)


def attach_genes(tree: HierarchyTree, id_filter) -> HierarchyTree:
    """Keep only leaves whose id is in ``id_filter`` and prune empty categories."""
    id_filter = set(id_filter)
    out = deepcopy(tree)

    def prune(node):
        node.genes = [g for g in node.genes if g.kegg_id in id_filter]
        node.children = [c for c in node.children if prune(c)]
        return bool(node.genes or node.children)

    prune(out)
    relevel(out)
    _dedupe_genes(out)
    return out


def category_members(tree: HierarchyTree, level: int = CATEGORY_DEPTH) -> Dict[str, set]:
    """Map each category label at ``level`` to the gene ids below it.

    Categories sharing a label are merged.
    """
    groups = {}
    for node in tree.iter_nodes():
        if node.level == level:
            groups.setdefault(node.label, set()).update(g.kegg_id for g in node.leaves())
    return groups
