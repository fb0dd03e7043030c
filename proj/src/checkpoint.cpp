#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "raydiff/config.hpp"
#include "raydiff/training.hpp"

// Container layout (little-endian):
//   "RAYDCKPT" | u32 version | u64 header length | header JSON | f32 sections | u32 CRC32
// The header lists tensors (name, rows, cols) and which sections follow, in order: params,
// ema, adam_m, adam_v. The CRC covers every preceding byte.

namespace raydiff {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'Y', 'D', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

void put_matrices(std::vector<std::uint8_t>& out, const std::vector<nn::Matrix<float>>& ms) {
    for (const auto& m : ms) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
        out.insert(out.end(), p, p + m.size() * sizeof(float));
    }
}

std::vector<nn::Matrix<float>> values_of(const std::vector<nn::Parameter<float>>& ps) {
    std::vector<nn::Matrix<float>> out;
    for (const auto& p : ps) out.push_back(p.value);
    return out;
}

class Cursor {
public:
    Cursor(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void fill(nn::Matrix<float>& m) {
        need(m.size() * sizeof(float));
        std::memcpy(m.data(), b_.data() + pos_, m.size() * sizeof(float));
        pos_ += m.size() * sizeof(float);
    }
    bool done() const { return pos_ == end_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) throw CheckpointError("checkpoint truncated");
    }
    const std::vector<std::uint8_t>& b_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

struct Parsed {
    Json header;
    RinConfig model;
    PipelineConfig pipeline;
    TrainConfig train;
    std::vector<std::vector<nn::Matrix<float>>> sections;  // in header "sections" order
    std::vector<std::string> section_names;
};

Parsed parse(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (b.size() < sizeof kMagic + 4 + 8 + 4 || std::memcmp(b.data(), kMagic, sizeof kMagic) != 0)
        throw CheckpointError(path.string() + ": not a raydiff checkpoint");
    const std::size_t body = b.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, b.data() + body, 4);
    if (static_cast<std::uint32_t>(crc32(0L, b.data(), static_cast<uInt>(body))) != stored)
        throw CheckpointError(path.string() + ": CRC mismatch (corrupt checkpoint)");

    Cursor c(b, body);
    c.bytes(sizeof kMagic);
    if (c.get<std::uint32_t>() != static_cast<std::uint32_t>(kCheckpointVersion))
        throw CheckpointError(path.string() + ": unsupported checkpoint version");
    Parsed p;
    try {
        p.header = Json::parse(c.bytes(c.get<std::uint64_t>()));
        p.model = read_rin_config(p.header.at("model"));
        p.pipeline = read_pipeline_config(p.header.at("pipeline"));
        p.train = read_train_config(p.header.at("train"));
        p.model.validate();
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(path.string() + ": bad header: " + e.what());
    }
    const auto specs = parameter_specs(p.model);
    const Json& tensors = p.header.at("tensors");
    if (tensors.size() != specs.size()) throw CheckpointError(path.string() + ": tensor list does not match config");
    for (std::size_t i = 0; i < specs.size(); ++i)
        if (tensors[i].at("name") != specs[i].name || tensors[i].at("rows") != specs[i].rows ||
            tensors[i].at("cols") != specs[i].cols)
            throw CheckpointError(path.string() + ": tensor " + specs[i].name + " has an unexpected shape");
    for (const auto& name : p.header.at("sections")) {
        p.section_names.push_back(name.get<std::string>());
        std::vector<nn::Matrix<float>> ms;
        for (const auto& s : specs) {
            nn::Matrix<float> m(s.rows, s.cols);
            c.fill(m);
            ms.push_back(std::move(m));
        }
        p.sections.push_back(std::move(ms));
    }
    if (!c.done()) throw CheckpointError(path.string() + ": trailing bytes");
    return p;
}

const std::vector<nn::Matrix<float>>* section(const Parsed& p, const std::string& name) {
    for (std::size_t i = 0; i < p.section_names.size(); ++i)
        if (p.section_names[i] == name) return &p.sections[i];
    return nullptr;
}

RinModel<float> model_with(const RinConfig& cfg, const std::vector<nn::Matrix<float>>& values) {
    RinModel<float> m(cfg, 0);
    for (std::size_t i = 0; i < values.size(); ++i) m.parameters()[i].value = values[i];
    return m;
}

}  // namespace

void Trainer::save(const std::filesystem::path& path) const {
    Json tensors = Json::array();
    for (const auto& s : parameter_specs(model_.config())) tensors.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
    const bool moments = !opt_.first_moment().empty();
    Json sections = {"params", "ema"};
    if (moments) sections.push_back("adam_m"), sections.push_back("adam_v");
    const Json header = {{"format_version", kCheckpointVersion},
                         {"model", to_json(model_.config())},
                         {"pipeline", to_json(pipeline_)},
                         {"train", to_json(train_)},
                         {"step", step_},
                         {"schedule_horizon", horizon_},
                         {"adam_steps", opt_.steps()},
                         {"rng", {{"kind", "counter"}, {"seed", train_.seed}, {"counter", step_}}},
                         {"tensors", tensors},
                         {"sections", sections}};
    const std::string h = header.dump();

    std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, h.size());
    out.insert(out.end(), h.begin(), h.end());
    put_matrices(out, values_of(model_.parameters()));
    put_matrices(out, ema_.shadow());
    if (moments) {
        put_matrices(out, opt_.first_moment());
        put_matrices(out, opt_.second_moment());
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(crc32(0L, out.data(), static_cast<uInt>(out.size()))));

    // Write-then-rename so an interrupted save never leaves a truncated checkpoint behind.
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot write " + tmp.string());
        os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
        if (!os) throw CheckpointError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Trainer Trainer::load(const std::filesystem::path& path) {
    const Parsed p = parse(path);
    const auto* params = section(p, "params");
    const auto* ema = section(p, "ema");
    if (!params || !ema) throw CheckpointError(path.string() + ": missing parameter sections");
    Trainer t(model_with(p.model, *params), p.pipeline, p.train);
    t.ema_.shadow() = *ema;
    t.step_ = p.header.at("step").get<std::int64_t>();
    t.horizon_ = p.header.at("schedule_horizon").get<std::int64_t>();
    t.opt_.set_steps(p.header.at("adam_steps").get<std::int64_t>());
    const auto* m = section(p, "adam_m");
    const auto* v = section(p, "adam_v");
    if (m && v) {
        t.opt_.first_moment() = *m;
        t.opt_.second_moment() = *v;
    }
    return t;
}

LoadedModel load_model(const std::filesystem::path& path) {
    const Parsed p = parse(path);
    const auto* params = section(p, "params");
    if (!params) throw CheckpointError(path.string() + ": missing parameters");
    const auto* ema = section(p, "ema");
    return {model_with(p.model, ema ? *ema : *params), model_with(p.model, *params), p.pipeline,
            p.header.at("step").get<std::int64_t>()};
}

}  // namespace raydiff
