from XferEngine.engine import Engine
from XferEngine.Topology import Topo
