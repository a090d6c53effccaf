#pragma once

#include "maco/config.hpp"

// A run small enough to train in well under a second.
inline maco::RunConfig tiny_run(const std::string& out_dir) {
    maco::RunConfig c;
    c.out_dir = out_dir;
    c.data.dir = out_dir + "/data";
    c.data.n_train = 32;
    c.data.n_val = 8;
    c.data.n_test = 24;
    auto& s = c.data.scene;
    s.image_size = 32;
    s.margin = 4;
    s.min_radius = 2.0;
    s.max_radius = 3.5;
    auto& m = c.model;
    m.image_size = 32;
    m.ratio = 2;
    m.patch_size = 4;
    m.width = 16;
    m.depth = 1;
    m.heads = 2;
    m.decoder_depth = 1;
    m.decoder_width = 16;
    m.mlp_ratio = 2;
    m.text_depth = 1;
    m.max_text_len = 24;
    m.embed_dim = 8;
    c.train.batch_size = 8;
    c.train.epochs = 2;
    c.train.warmup_fraction = 0.25;
    c.eval.probe.epochs = 5;
    return c;
}
