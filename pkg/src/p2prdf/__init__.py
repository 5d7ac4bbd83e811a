"""Peer-to-peer RDF triple store over a binary-trie overlay."""

__version__ = "0.1.0"
