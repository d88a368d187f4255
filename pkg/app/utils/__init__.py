# keyed random streams, streaming moments, run artifacts
