##Copyright 2024-2026 the XferEngine developers
##
##This file is part of XferEngine.
##
##XferEngine is free software: you can redistribute it and/or modify
##it under the terms of the GNU Lesser General Public License as published by
##the Free Software Foundation, either version 3 of the License, or
##(at your option) any later version.
##
##XferEngine is distributed in the hope that it will be useful,
##but WITHOUT ANY WARRANTY; without even the implied warranty of
##MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
##GNU Lesser General Public License for more details.
##
##You should have received a copy of the GNU Lesser General Public License
##along with XferEngine.  If not, see <http://www.gnu.org/licenses/>

__all__ = ["Topo", "dumpTopology"]


class Topo(object):
    """
    Rank layout traversal
    """

    def __init__(self, num_ranks, ranks_per_node=None, num_experts=None):
        """

        describes how ranks are grouped into nodes, and how experts are
        placed on ranks when the layout serves an expert parallel layer

        ranks of one node talk through the shared memory lane, every other
        pair of ranks goes through the engine

        :param ranks_per_node: defaults to every rank on its own node

        :param num_experts: must be a multiple of num_ranks; expert e lives
        on rank e // (num_experts / num_ranks)

        """
        assert num_ranks >= 1, "need at least one rank"
        if ranks_per_node is None:
            ranks_per_node = 1
        assert ranks_per_node >= 1, "need at least one rank per node"
        self.num_ranks = num_ranks
        self.ranks_per_node = ranks_per_node
        if num_experts is not None and num_experts % num_ranks:
            raise ValueError("%d experts do not divide over %d ranks" % (num_experts, num_ranks))
        self.num_experts = num_experts

    def _check_rank(self, rank):
        if not 0 <= rank < self.num_ranks:
            raise IndexError("rank %d outside 0..%d" % (rank, self.num_ranks - 1))

    def ranks(self):
        return iter(range(self.num_ranks))

    def nodes(self):
        return iter(range(self.number_of_nodes()))

    def number_of_nodes(self):
        return -(-self.num_ranks // self.ranks_per_node)

    def node_of(self, rank):
        self._check_rank(rank)
        return rank // self.ranks_per_node

    def ranks_on_node(self, node):
        first = node * self.ranks_per_node
        return iter(range(first, min(first + self.ranks_per_node, self.num_ranks)))

    def inter_node_peers(self, rank):
        node = self.node_of(rank)
        return iter([r for r in self.ranks() if self.node_of(r) != node])

    # -----------------------------------------------------------------------
    # experts
    # -----------------------------------------------------------------------

    @property
    def experts_per_rank(self):
        if self.num_experts is None:
            raise ValueError("this layout places no experts")
        return self.num_experts // self.num_ranks

    def experts_on_rank(self, rank):
        self._check_rank(rank)
        first = rank * self.experts_per_rank
        return iter(range(first, first + self.experts_per_rank))


def dumpTopology(topo):
    """
    one line per node, listing its ranks and their experts
    """
    lines = []
    for node in topo.nodes():
        parts = []
        for rank in topo.ranks_on_node(node):
            if topo.num_experts is None:
                parts.append("%d" % rank)
            else:
                experts = list(topo.experts_on_rank(rank))
                parts.append("%d[%d-%d]" % (rank, experts[0], experts[-1]))
        lines.append("node %d: %s" % (node, " ".join(parts)))
    return "\n".join(lines)
