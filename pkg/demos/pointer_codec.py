"""Pointer embedding of a client byte stream into 160-byte slot bodies.

Every idle byte holds the offset of the next idle in the same body, the
last one holds NULL, and the anchor names the first. Data bytes pass
unchanged, so the gap pattern comes back at byte precision.
"""

import numpy as np

from tdmshim.codec import NULL, ClientByteStream, ClientFrame, embed_pointer, extract_pointer

rng = np.random.default_rng(1)
frames = [ClientFrame.random(0, 64, rng), ClientFrame.random(1, 120, rng)]
stream = ClientByteStream.from_frames(frames, [12, 30])
bodies = embed_pointer(stream, 160)
for i, b in enumerate(bodies):
    chain = []
    p = b.anchor
    while p != NULL:
        chain.append(p)
        p = b.body[p]
    print(f"body {i}: anchor {b.anchor}, idle chain {chain[:6]}{' ...' if len(chain) > 6 else ''} ({len(chain)} idles)")
back = extract_pointer(bodies, 160, len(stream))
print("roundtrip identical:", back == stream)
