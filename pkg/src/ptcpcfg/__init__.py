"""Compound PCFG grammar induction from loosely aligned video and text."""
