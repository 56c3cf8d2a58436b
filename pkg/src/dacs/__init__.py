"""Desk-scale destination-addressing control testbed.

A rule server distributes per-user/per-client communication policy to client
agents that rewrite or block connection destinations at dial time; on top of
that, cloning an authentication-free CGI application per group and mapping
each clone to its own virtual-host socket gives group isolation behind one
shared URL.
"""

__version__ = "0.1.0"
