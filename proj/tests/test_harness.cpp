#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "m2va/checkpoint.hpp"
#include "m2va/config.hpp"
#include "m2va/dataset.hpp"
#include "m2va/train.hpp"

using namespace m2va;

namespace {

DatasetConfig tiny_data() {
    DatasetConfig d;
    d.per_class_train = 2;
    d.per_class_val = 1;
    d.per_class_holdout = 1;
    d.frames = 2;
    d.image = 8;
    d.seed = 5;
    return d;
}

ExperimentConfig tiny_experiment() {
    ExperimentConfig cfg;
    cfg.model.video_layers = 2;
    cfg.model.text_layers = 2;
    cfg.model.d_v = 8;
    cfg.model.d_l = 8;
    cfg.model.d_vl = 4;
    cfg.model.patch = 4;
    cfg.model.image = 8;
    cfg.model.frames = 2;
    cfg.model.heads_v = 2;
    cfg.model.heads_l = 2;
    cfg.model.max_text_len = 8;
    cfg.placement = AdapterPlacement::defaults(2, 2);
    cfg.data = tiny_data();
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg.train.seed = 9;
    return cfg;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

// Column (axis=1) or row (axis=0) shift between consecutive frames that
// maximizes cross-correlation; the independent oracle for motion classes.
idx best_shift(const VideoClip& clip, idx t, int axis, idx window) {
    const Tensor& f = clip.frames;
    idx H = f.dim(1), W = f.dim(2);
    idx best = 0;
    double best_corr = -1e300;
    for (idx s = -window; s <= window; ++s) {
        double corr = 0;
        for (idx y = 0; y < H; ++y)
            for (idx x = 0; x < W; ++x) {
                idx y2 = y + (axis == 0 ? s : 0), x2 = x + (axis == 1 ? s : 0);
                if (y2 < 0 || y2 >= H || x2 < 0 || x2 >= W) continue;
                for (idx c = 0; c < 3; ++c)
                    corr += f.at({t, y, x, c}) * f.at({t + 1, y2, x2, c});
            }
        if (corr > best_corr) {
            best_corr = corr;
            best = s;
        }
    }
    return best;
}

double frame_diff_energy(const VideoClip& clip) {
    const Tensor& f = clip.frames;
    idx T = f.dim(0), per = f.dim(1) * f.dim(2) * f.dim(3);
    double e = 0;
    for (idx t = 0; t + 1 < T; ++t)
        for (idx i = 0; i < per; ++i) {
            double d = f.data()[size_t((t + 1) * per + i)] -
                       f.data()[size_t(t * per + i)];
            e += d * d;
        }
    return e / double((T - 1) * per);
}

}  // namespace

TEST_CASE("dataset generation is deterministic in the seed") {
    DatasetConfig d = tiny_data();
    SyntheticDataset a = generate_synthetic_dataset(d);
    SyntheticDataset b = generate_synthetic_dataset(d);
    REQUIRE(a.train.clips.size() == b.train.clips.size());
    for (size_t i = 0; i < a.train.clips.size(); ++i)
        CHECK(a.train.clips[i].frames.data() == b.train.clips[i].frames.data());
    CHECK(a.val.labels == b.val.labels);

    d.seed = 6;
    SyntheticDataset c = generate_synthetic_dataset(d);
    CHECK(a.train.clips[0].frames.data() != c.train.clips[0].frames.data());
}

TEST_CASE("dataset shapes, split sizes and label ranges") {
    DatasetConfig d = tiny_data();
    SyntheticDataset data = generate_synthetic_dataset(d);
    CHECK(data.train_classes.size() == 8);
    CHECK(data.holdout_classes.size() == 4);
    CHECK(data.train.clips.size() == size_t(8 * d.per_class_train));
    CHECK(data.val.clips.size() == size_t(8 * d.per_class_val));
    CHECK(data.holdout.clips.size() == size_t(4 * d.per_class_holdout));
    for (const VideoClip& c : data.train.clips) {
        CHECK(c.frames.dim(0) == d.frames);
        CHECK(c.frames.dim(1) == d.image);
        CHECK(c.frames.dim(2) == d.image);
        CHECK(c.frames.dim(3) == 3);
    }
    for (idx l : data.train.labels) {
        CHECK(l >= 0);
        CHECK(l < 8);
    }
    std::set<std::string> train(data.train_classes.begin(), data.train_classes.end());
    for (const std::string& h : data.holdout_classes) CHECK(train.count(h) == 0);
}

TEST_CASE("motion classes shift by one pixel per frame under cross-correlation") {
    struct Expect {
        const char* name;
        int axis;
        idx shift;
    };
    const Expect cases[] = {{"moving left", 1, -1},
                            {"moving right", 1, 1},
                            {"moving up", 0, -1},
                            {"moving down", 0, 1}};
    for (const Expect& e : cases)
        for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
            VideoClip clip = render_clip(e.name, 6, 32, seed);
            for (idx t = 0; t + 1 < 6; ++t)
                CHECK(best_shift(clip, t, e.axis, 3) == e.shift);
        }
}

TEST_CASE("static classes stay put and carry the advertised brightness sign") {
    for (std::uint64_t seed : {21ull, 22ull}) {
        VideoClip clip = render_clip("bright square", 4, 32, seed);
        for (idx t = 0; t + 1 < 4; ++t) {
            CHECK(best_shift(clip, t, 0, 2) == 0);
            CHECK(best_shift(clip, t, 1, 2) == 0);
        }
        // brightest pixel belongs to the square and must be positive
        double mx = -1e300, mn = 1e300;
        for (double v : clip.frames.data()) {
            mx = std::max(mx, v);
            mn = std::min(mn, v);
        }
        CHECK(mx > 1.0);
        VideoClip dark = render_clip("dark square", 4, 32, seed);
        mn = 1e300;
        for (double v : dark.frames.data()) mn = std::min(mn, v);
        CHECK(mn < -1.0);
    }
}

TEST_CASE("frame-difference energy separates moving from static classes") {
    // static squares: differences are pure per-frame noise, E[(n1-n2)^2] = 2 sigma^2
    for (std::uint64_t seed : {31ull, 32ull, 33ull}) {
        double still = frame_diff_energy(render_clip("bright square", 8, 32, seed));
        double moving = frame_diff_energy(render_clip("moving left", 8, 32, seed));
        CHECK(still == doctest::Approx(2 * 0.05 * 0.05).epsilon(0.15));
        // moving edges add signal energy well above the noise floor's spread
        CHECK(moving > still + 0.01);
    }
}

TEST_CASE("dataset rejects degenerate configurations") {
    DatasetConfig d = tiny_data();
    d.per_class_train = 0;
    CHECK_THROWS_AS(generate_synthetic_dataset(d), ConfigError);
    d = tiny_data();
    d.image = 4;
    CHECK_THROWS_AS(generate_synthetic_dataset(d), ConfigError);
    d = tiny_data();
    d.frames = 0;
    CHECK_THROWS_AS(generate_synthetic_dataset(d), ConfigError);
}

TEST_CASE("is_motion_class flags exactly the moving classes") {
    idx n = 0;
    for (const std::string& c : kTrainClassNames) n += is_motion_class(c);
    CHECK(n == 4);
    CHECK(is_motion_class("bright moving left"));
    CHECK_FALSE(is_motion_class("growing square"));
}

TEST_CASE("config text round-trips through the parser") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.heads.cmlm = false;
    cfg.train.lr = 5e-4;
    cfg.placement.video_layers = {2};
    std::string text = config_to_text(cfg);
    ExperimentConfig back = parse_config_text(text);
    CHECK(config_to_text(back) == text);
}

TEST_CASE("config parser applies dotted keys, comments and lists") {
    ExperimentConfig cfg = parse_config_text(
        "# an experiment\n"
        "model.d_vl = 16\n"
        "placement.video_layers = 1, 3\n"
        "placement.text_layers = none\n"
        "placement.ted_mode = td_only\n"
        "heads.vc = false\n"
        "train.lr = 0.01\n"
        "train.optimizer = sgd\n"
        "data.seed = 42\n");
    CHECK(cfg.model.d_vl == 16);
    CHECK(cfg.placement.video_layers == std::set<idx>{1, 3});
    CHECK(cfg.placement.text_layers.empty());
    CHECK(cfg.placement.ted_mode == TedMode::kTdOnly);
    CHECK_FALSE(cfg.heads.vc);
    CHECK(cfg.train.lr == doctest::Approx(0.01));
    CHECK(cfg.train.optimizer == Optimizer::kSgd);
    CHECK(cfg.data.seed == 42);
}

TEST_CASE("config parser rejects unknown keys and bad values") {
    CHECK_THROWS_AS(parse_config_text("model.bogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train.lr = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("heads.vc = maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("model.d_v\n"), ConfigError);
}

TEST_CASE("duplicate config keys keep the last value") {
    ExperimentConfig cfg =
        parse_config_text("train.epochs = 3\ntrain.epochs = 7\n");
    CHECK(cfg.train.epochs == 7);
}

TEST_CASE("command-line overrides win over file values") {
    ExperimentConfig cfg = parse_config_text("train.epochs = 3\n");
    apply_override(cfg, "train.epochs=9");
    CHECK(cfg.train.epochs == 9);
    CHECK_THROWS_AS(apply_override(cfg, "no_equals_sign"), ConfigError);
    CHECK_THROWS_AS(apply_override(cfg, "mystery.key=1"), ConfigError);
}

TEST_CASE("dataset settings inherit frames and image size from the model") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.model.frames = 5;
    cfg.model.image = 16;
    DatasetConfig d = dataset_config(cfg);
    CHECK(d.frames == 5);
    CHECK(d.image == 16);
    CHECK(d.seed == cfg.data.seed);
}

TEST_CASE("train config validation needs batches of two for contrastive") {
    TrainConfig t;
    t.batch_size = 1;
    CHECK_THROWS_AS(t.validate(true), ConfigError);
    CHECK_NOTHROW(t.validate(false));
    t.batch_size = 8;
    t.lr = -1;
    CHECK_THROWS_AS(t.validate(false), ConfigError);
}

TEST_CASE("checkpoint save, load and save again is byte-identical") {
    ExperimentConfig cfg = tiny_experiment();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    std::string text = config_to_text(cfg);
    std::string p1 = "ckpt_a.bin", p2 = "ckpt_b.bin";
    save_checkpoint(m.params, text, 17, p1);

    Checkpoint ck = load_checkpoint(p1);
    CHECK(ck.step == 17);
    CHECK(ck.config_text == text);
    CHECK(ck.tensors.size() == m.params.all().size());

    Model m2 = build_from_experiment(cfg, data);
    restore_params(m2.params, ck);
    save_checkpoint(m2.params, ck.config_text, ck.step, p2);
    CHECK(read_bytes(p1) == read_bytes(p2));

    // restored model reproduces the original forward bit for bit
    VideoEmbedding a = encode_video(m, data.val.clips[0]);
    VideoEmbedding b = encode_video(m2, data.val.clips[0]);
    CHECK(a.pooled.data() == b.pooled.data());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("checkpoint loader rejects corrupt and truncated files") {
    ExperimentConfig cfg = tiny_experiment();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    std::string path = "ckpt_c.bin";
    save_checkpoint(m.params, config_to_text(cfg), 0, path);
    std::string bytes = read_bytes(path);

    std::string bad = bytes;
    bad[0] = 'X';
    write_bytes(path, bad);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    write_bytes(path, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    write_bytes(path, bytes.substr(0, 3));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    CHECK_THROWS_AS(load_checkpoint("no_such_file.bin"), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("restoring into a mismatched model names the offending tensor") {
    ExperimentConfig cfg = tiny_experiment();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    std::string path = "ckpt_d.bin";
    save_checkpoint(m.params, config_to_text(cfg), 0, path);
    Checkpoint ck = load_checkpoint(path);

    ExperimentConfig other = cfg;
    other.model.d_vl = 8;  // projection shapes change
    SyntheticDataset data2 = generate_synthetic_dataset(dataset_config(other));
    Model m2 = build_from_experiment(other, data2);
    try {
        restore_params(m2.params, ck);
        FAIL("expected a format error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("video.proj") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("zero epochs leaves every parameter untouched") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.train.epochs = 0;
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    std::vector<std::vector<double>> before;
    for (const Parameter& p : m.params.all()) before.push_back(p.tensor.data());
    MetricsReport rep = train(m, data, cfg.train);
    CHECK(rep.rows.empty());
    for (size_t i = 0; i < before.size(); ++i)
        CHECK(m.params.all()[i].tensor.data() == before[i]);
}

TEST_CASE("a zero learning rate is a no-op and lr > 0 moves only trainables") {
    ExperimentConfig cfg = tiny_experiment();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));

    cfg.train.lr = 0.0;
    Model m = build_from_experiment(cfg, data);
    std::vector<std::vector<double>> before;
    for (const Parameter& p : m.params.all()) before.push_back(p.tensor.data());
    train(m, data, cfg.train);
    for (size_t i = 0; i < before.size(); ++i)
        CHECK(m.params.all()[i].tensor.data() == before[i]);

    cfg.train.lr = 1e-3;
    Model m2 = build_from_experiment(cfg, data);
    train(m2, data, cfg.train);
    bool some_moved = false;
    for (size_t i = 0; i < before.size(); ++i) {
        const Parameter& p = m2.params.all()[i];
        if (p.trainable) {
            if (p.tensor.data() != before[i]) some_moved = true;
        } else {
            CHECK(p.tensor.data() == before[i]);  // frozen stays frozen
        }
    }
    CHECK(some_moved);
}

TEST_CASE("training reduces the loss on the tiny corpus") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.train.epochs = 4;
    cfg.train.eval_every = 1;
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    MetricsReport rep = train(m, data, cfg.train);
    REQUIRE(rep.rows.size() == 4);
    CHECK(rep.rows.back().loss_total < rep.rows.front().loss_total);
    for (const MetricsRow& r : rep.rows) {
        CHECK(std::isfinite(r.loss_total));
        CHECK(r.trainable == m.params.count_trainable());
    }
}

TEST_CASE("training twice from the same seed is bit-identical") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.train.epochs = 2;
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model a = build_from_experiment(cfg, data);
    Model b = build_from_experiment(cfg, data);
    train(a, data, cfg.train);
    train(b, data, cfg.train);
    for (size_t i = 0; i < a.params.all().size(); ++i)
        CHECK(a.params.all()[i].tensor.data() == b.params.all()[i].tensor.data());
}

TEST_CASE("metrics rows and header agree on the column count") {
    std::string header = MetricsReport::tsv_header();
    MetricsRow r;
    std::string line = MetricsReport::tsv_line(r);
    auto cols = [](const std::string& s) {
        return std::count(s.begin(), s.end(), '\t') + 1;
    };
    CHECK(cols(header) == cols(line));
    CHECK(header.back() == '\n');
    CHECK(line.back() == '\n');
}

TEST_CASE("zero-shot evaluation refuses overlapping class lists") {
    ExperimentConfig cfg = tiny_experiment();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    CHECK_THROWS_AS(
        evaluate_zero_shot(m, data.val, data.train_classes, data.train_classes),
        ContractError);
    double zs = evaluate_zero_shot(m, data.holdout, data.holdout_classes,
                                   data.train_classes);
    CHECK(zs >= 0.0);
    CHECK(zs <= 1.0);
}

TEST_CASE("masked-word accuracy is a proportion") {
    ExperimentConfig cfg = tiny_experiment();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    double acc = cmlm_word_accuracy(m, data);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
}

TEST_CASE("parameter table lists every module and a consistent total") {
    ExperimentConfig cfg = tiny_experiment();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    std::string table = params_table(m.params);
    CHECK(table.find("total\t") != std::string::npos);
    CHECK(table.find(std::to_string(m.params.count_trainable())) !=
          std::string::npos);
    CHECK(m.params.count_trainable() ==
          expected_trainable_params(m.cfg, m.placement, m.heads, m.vocab.size(),
                                    m.num_classes));
}
