"""Desk-scale video-action models: a conditional flow-matching video
transformer whose intermediate activations condition a flow-matching action
decoder, plus the toy manipulation environment and experiment harness used
to study the pairing."""

__version__ = "0.1.0"
