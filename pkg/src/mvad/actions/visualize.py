"""Graphviz DOT visualization of a recorded gradient tape."""

from __future__ import annotations

from mvad.tensor import Tape

# Op colors (rotate through these, one per distinct op name)
_OP_COLORS = [
    "#4A90D9",
    "#50C878",
    "#E8A838",
    "#D94A4A",
    "#9B59B6",
    "#1ABC9C",
    "#E67E22",
    "#3498DB",
]
_LEAF_COLOR = "#7F8C8D"


def _escape_dot(text: str) -> str:
    """Escape special characters for DOT format."""
    return text.replace('"', '\\"').replace("\n", "\\n")


class Visualize:
    """Generate Graphviz DOT views of a :class:`Tape`.

    Usage:
        with Tape() as tape:
            loss = distillation_loss(*forward(model, images))
            tape.backward(loss)

        dot_string = Visualize().tape(tape)
        data = Visualize().tape_to_dict(tape)   # {"nodes": [...], "edges": [...]}

        # If graphviz package is installed, get a Source object
        Visualize().tape_to_graphviz(tape).render("step0", format="svg")
    """

    def __init__(self, *, show_shapes: bool = True, show_leaves: bool = True):
        self.show_shapes = show_shapes
        self.show_leaves = show_leaves

    def _graph(self, tape: Tape) -> tuple[list[dict], list[dict]]:
        """Nodes (ops, then leaves) and producer→consumer edges, in recording order."""
        producers = {id(node.output): f"op{node.index}" for node in tape.nodes}
        op_names = sorted({node.op for node in tape.nodes})
        color_map = {op: _OP_COLORS[i % len(_OP_COLORS)] for i, op in enumerate(op_names)}

        nodes: list[dict] = []
        edges: list[dict] = []
        leaves: dict[int, str] = {}
        for node in tape.nodes:
            nodes.append(
                {
                    "id": f"op{node.index}",
                    "label": node.op,
                    "shape": list(node.output.shape),
                    "color": color_map[node.op],
                    "leaf": False,
                }
            )
            for tensor in node.inputs:
                source = producers.get(id(tensor))
                if source is None:
                    if not (self.show_leaves and tensor.requires_grad):
                        continue
                    if id(tensor) not in leaves:
                        leaves[id(tensor)] = f"leaf{len(leaves)}"
                        nodes.append(
                            {
                                "id": leaves[id(tensor)],
                                "label": tensor.name or "param",
                                "shape": list(tensor.shape),
                                "color": _LEAF_COLOR,
                                "leaf": True,
                            }
                        )
                    source = leaves[id(tensor)]
                edges.append({"source": source, "target": f"op{node.index}"})
        return nodes, edges

    def tape(self, tape: Tape) -> str:
        """Generate a DOT string with one node per recorded op."""
        lines = ["digraph Tape {", "  rankdir=TB;", "  node [shape=box];", ""]
        nodes, edges = self._graph(tape)
        for node in nodes:
            label = node["label"]
            if self.show_shapes:
                label += "\n" + ("×".join(str(n) for n in node["shape"]) or "scalar")
            lines.append(
                f'  {node["id"]} [label="{_escape_dot(label)}" '
                f'style=filled fillcolor="{node["color"]}" fontcolor=white];'
            )
        lines.append("")
        for edge in edges:
            lines.append(f"  {edge['source']} -> {edge['target']};")
        lines.append("}")
        return "\n".join(lines)

    def tape_to_dict(self, tape: Tape) -> dict:
        """Return the tape graph as JSON-ready ``{"nodes", "edges"}``."""
        nodes, edges = self._graph(tape)
        return {"nodes": nodes, "edges": edges}

    def tape_to_graphviz(self, tape: Tape):
        """Return a ``graphviz.Source`` (requires the graphviz package)."""
        try:
            import graphviz
        except ImportError:
            raise ImportError(
                "The graphviz package is required for tape_to_graphviz(). "
                "Install it with: pip install mvad[viz]"
            )
        return graphviz.Source(self.tape(tape))
