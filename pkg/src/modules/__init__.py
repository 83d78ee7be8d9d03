# Domain modules: ingest, graph, nn_core, embedding, classify, forecast, synth_bench.
