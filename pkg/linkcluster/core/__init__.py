# Core primitives: graphs, the dense network engine, file formats and presets
