#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <random>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "acceptance.hpp"
#include "data_fixtures.hpp"

namespace raydiff::acceptance {

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

bool same_state(const Trainer& a, const Trainer& b) {
    auto equal = [](const auto& x, const auto& y) {
        if (x.size() != y.size()) return false;
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!(x[i] == y[i])) return false;
        return true;
    };
    for (std::size_t i = 0; i < a.model().parameters().size(); ++i)
        if (!(a.model().parameters()[i].value == b.model().parameters()[i].value)) return false;
    return a.steps_done() == b.steps_done() && a.optimizer().steps() == b.optimizer().steps() &&
           equal(a.ema().shadow(), b.ema().shadow()) && equal(a.optimizer().first_moment(), b.optimizer().first_moment()) &&
           equal(a.optimizer().second_moment(), b.optimizer().second_moment());
}

}  // namespace

Outcome format_suite(const fs::path& workdir, const std::string& cli) {
    Outcome o;
    std::vector<std::string> done;

    // Shards: random records (NaN depths, missing depth maps, odd ids) plus a rendered scene.
    {
        std::mt19937_64 rng(1001);
        std::vector<SceneRecord> scenes;
        for (int k = 0; k < 20; ++k) scenes.push_back(testing::random_scene(rng, fmt::format("rand-{}\t\"{}\"", k, k), 1 + k % 5));
        SyntheticSpec room;
        room.seed = 7;
        room.num_frames = 10;
        room.layout = Layout::Room;
        scenes.push_back(generate_synthetic_scene(room));
        const fs::path dir = workdir / "shards";
        fs::remove_all(dir);
        ShardWriterOptions small;
        small.max_shard_bytes = 16 << 10;
        const auto entries = write_shards(scenes, dir, small);
        const ShardReadReport back = read_shards(dir / "manifest.jsonl");
        o.require(back.errors.empty(), "shard read reported errors");
        o.require(back.scenes.size() == scenes.size(), "scene count changed");
        std::size_t frames = 0, mismatched = 0;
        for (std::size_t s = 0; s < std::min(back.scenes.size(), scenes.size()); ++s) {
            const SceneRecord &a = scenes[s], &b = back.scenes[s];
            if (a.id != b.id || a.metric != b.metric || a.dynamic != b.dynamic || a.frames.size() != b.frames.size()) {
                ++mismatched;
                continue;
            }
            for (std::size_t f = 0; f < a.frames.size(); ++f, ++frames)
                if (!testing::frames_equal(a.frames[f], b.frames[f])) ++mismatched;
        }
        std::size_t shards = 0;
        for (const auto& e : fs::directory_iterator(dir)) shards += e.path().extension() == ".rds";
        o.require(mismatched == 0, fmt::format("{} records differ after the round trip", mismatched));
        done.push_back(fmt::format("{} frames over {} shards lossless", frames, shards));
    }

    const ToyWorld world = make_toy_world();
    const RunConfig& rc = world.config;

    // Library resume: 2 steps, save, load, 2 more equals 4 uninterrupted steps bit for bit.
    {
        std::vector<SceneRecord> scenes(world.scenes.begin(), world.scenes.begin() + 2);
        std::vector<CuratedSample> samples;
        for (const auto& s : world.samples)
            if (s.scene == scenes[0].id || s.scene == scenes[1].id) samples.push_back(s);
        const TrainingData data(scenes, samples);
        TrainConfig tc = rc.train;
        tc.steps = 4;
        tc.batch_size = 2;
        tc.warmup = 2;
        Trainer whole(RinModel<float>(rc.model, 5), rc.pipeline, tc);
        whole.run(data, 4);
        Trainer part(RinModel<float>(rc.model, 5), rc.pipeline, tc);
        part.run(data, 2);
        part.save(workdir / "part.ckpt");
        Trainer resumed = Trainer::load(workdir / "part.ckpt");
        resumed.run(data, 4);
        o.require(same_state(whole, resumed), "resumed training state differs from the uninterrupted run");
        whole.save(workdir / "whole.ckpt");
        resumed.save(workdir / "resumed.ckpt");
        o.require(slurp(workdir / "whole.ckpt") == slurp(workdir / "resumed.ckpt"), "resumed checkpoint bytes differ");

        // Fixed-seed sampling: twice in a batch, and one target on its own.
        const SceneRecord& s = scenes[0];
        GenerationRequest req;
        for (int c : {0, 2}) req.conditioning.push_back({to_float(s.frames[c].image), s.frames[c].camera});
        req.targets = {s.frames[1].camera, s.frames[5].camera};
        req.options.seed = 42;
        const RinModel<float> model = resumed.ema_model();
        const auto a = synthesize(model, rc.pipeline, req);
        const auto b = synthesize(model, rc.pipeline, req);
        bool same = true;
        for (std::size_t t = 0; t < a.size(); ++t)
            same &= a[t].image->data == b[t].image->data && testing::bit_equal(*a[t].depth, *b[t].depth);
        const TargetResult alone = synthesize_target(model, rc.pipeline, req.conditioning, req.targets[1], true, true,
                                                     req.options, 1);
        same &= alone.image->data == a[1].image->data && testing::bit_equal(*alone.depth, *a[1].depth);
        o.require(same, "fixed-seed synthesis is not reproducible");
        done.push_back("library resume and sampling bit-identical");
    }

    // The same properties through the executable.
    if (!cli.empty()) {
        const fs::path dir = workdir / "cli";
        fs::remove_all(dir);
        fs::create_directories(dir);
        auto run = [&](const std::string& args) {
            const std::string cmd = cli + " " + args + " -q > " + (dir / "log.txt").string() + " 2>&1";
            const int status = std::system(cmd.c_str());
            const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
            o.require(code == 0, fmt::format("`raydiff {}` exited {}", args.substr(0, args.find(' ')), code));
            return code == 0;
        };
        auto p = [&](const std::string& rel) { return (dir / rel).string(); };
        RunConfig fast = RunConfig::preset("toy");
        fast.train.batch_size = 2;
        fast.train.warmup = 2;
        save_run_config(p("fast.json"), fast);
        const std::string train = "train --config " + p("fast.json") + " --manifest " + p("data/manifest.jsonl") +
                                  " --pairs " + p("pairs/pairs.jsonl") + " --steps 4";
        const std::string sample = "sample --checkpoint " + p("whole/checkpoint.ckpt") + " --manifest " +
                                   p("data/manifest.jsonl") +
                                   " --scene scene-0 --views 0 2 --targets 1 3 --ensemble 2 --eval-steps 4 --seed 11";
        const bool ok = run("gen --seed 3 --count 2 --frames 40 --out " + p("data")) &&
                        run("curate --manifest " + p("data/manifest.jsonl") + " --task depth --out " + p("pairs")) &&
                        run(train + " --out " + p("whole")) && run(train + " --stop-at 2 --out " + p("part")) &&
                        run(train + " --resume " + p("part/checkpoint.ckpt") + " --out " + p("part")) &&
                        run(sample + " --out " + p("s1")) && run(sample + " --threads 2 --out " + p("s2"));
        if (ok) {
            o.require(slurp(dir / "whole" / "checkpoint.ckpt") == slurp(dir / "part" / "checkpoint.ckpt"),
                      "CLI resumed checkpoint differs");
            for (const char* f : {"scene-0_1.png", "scene-0_3_depth.raw", "cloud.ply"})
                o.require(slurp(dir / "s1" / f) == slurp(dir / "s2" / f) && !slurp(dir / "s1" / f).empty(),
                          fmt::format("CLI sample output {} differs between runs", f));
            done.push_back("CLI resume and sample outputs byte-identical");
        }
    }
    o.summary = fmt::format("{}", fmt::join(done, "; "));
    return o;
}

}  // namespace raydiff::acceptance
