#include "raydiff/datapipe.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "raydiff/image_io.hpp"

namespace raydiff {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "shard codec assumes a little-endian host");

constexpr std::uint32_t kRecordMagic = 0x31534452;  // "RDS1"
constexpr std::size_t kHeaderBytes = 4 + 8 + 4;     // magic, payload length, crc32

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_bytes(const std::uint8_t* p, std::size_t n) { bytes.insert(bytes.end(), p, p + n); }
    std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, p_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        need(n);
        const std::uint8_t* out = p_ + pos_;
        pos_ += n;
        return out;
    }
    bool done() const { return pos_ == n_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > n_) throw DataError("record payload truncated");
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
    return static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::string shard_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "shard-%05d.rds", index);
    return buf;
}

FrameRecord decode_payload(const std::vector<std::uint8_t>& payload) {
    ByteReader r(payload.data(), payload.size());
    const auto meta_len = r.get<std::uint32_t>();
    const auto* meta_p = r.take(meta_len);
    const json meta = json::parse(std::string(reinterpret_cast<const char*>(meta_p), meta_len));
    if (meta.at("format_version").get<int>() != kShardFormatVersion) throw DataError("unsupported record format version");
    FrameRecord rec;
    rec.scene = meta.at("scene").get<std::string>();
    rec.frame = meta.at("frame").get<int>();
    rec.num_frames = meta.at("num_frames").get<int>();
    rec.metric = meta.at("metric").get<bool>();
    rec.dynamic = meta.at("dynamic").get<bool>();
    rec.data.timestep = meta.at("timestep").get<double>();
    const int width = meta.at("width").get<int>(), height = meta.at("height").get<int>();

    const auto png_len = r.get<std::uint32_t>();
    const auto* png_p = r.take(png_len);
    rec.data.image = decode_png(std::vector<std::uint8_t>(png_p, png_p + png_len));
    if (rec.data.image.width != width || rec.data.image.height != height) throw DataError("image size disagrees with metadata");

    if (r.get<std::uint8_t>()) {
        const auto w = r.get<std::uint32_t>(), h = r.get<std::uint32_t>();
        DepthMap d(static_cast<int>(w), static_cast<int>(h));
        std::memcpy(d.data.data(), r.take(d.data.size() * sizeof(float)), d.data.size() * sizeof(float));
        rec.data.depth = std::move(d);
    }
    Mat4 T = Mat4::Identity();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) T(i, j) = r.get<double>();
    Mat3 K;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) K(i, j) = r.get<double>();
    rec.data.camera = Camera(K, T, width, height);
    if (!r.done()) throw DataError("trailing bytes in record payload");
    return rec;
}

}  // namespace

ShardError::ShardError(const std::string& shard_, std::uint64_t offset_, const std::string& what)
    : DataError(shard_ + "@" + std::to_string(offset_) + ": " + what), shard(shard_), offset(offset_) {}

std::vector<std::uint8_t> encode_record(const SceneRecord& scene, int frame) {
    const Frame& f = scene.frames.at(frame);
    const json meta = {{"format_version", kShardFormatVersion},
                       {"scene", scene.id},
                       {"frame", frame},
                       {"num_frames", scene.frames.size()},
                       {"metric", scene.metric},
                       {"dynamic", scene.dynamic},
                       {"timestep", f.timestep},
                       {"width", f.camera.width()},
                       {"height", f.camera.height()}};
    const std::string meta_s = meta.dump();
    const auto png = encode_png(f.image);

    ByteWriter w;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(meta_s.size()));
    w.put_bytes(reinterpret_cast<const std::uint8_t*>(meta_s.data()), meta_s.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(png.size()));
    w.put_bytes(png.data(), png.size());
    w.put<std::uint8_t>(f.depth ? 1 : 0);
    if (f.depth) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(f.depth->width));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(f.depth->height));
        w.put_bytes(reinterpret_cast<const std::uint8_t*>(f.depth->data.data()), f.depth->data.size() * sizeof(float));
    }
    const Mat4& T = f.camera.T();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) w.put<double>(T(i, j));
    const Mat3& K = f.camera.K();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) w.put<double>(K(i, j));
    return w.bytes;
}

std::vector<ShardLocation> write_shards(const std::vector<SceneRecord>& scenes, const fs::path& dir,
                                        const ShardWriterOptions& options) {
    fs::create_directories(dir);
    std::vector<ShardLocation> manifest;
    std::ofstream shard;
    int shard_index = -1;
    std::uint64_t offset = 0;
    for (const auto& scene : scenes) {
        for (int i = 0; i < static_cast<int>(scene.frames.size()); ++i) {
            const auto payload = encode_record(scene, i);
            if (shard_index < 0 || offset >= options.max_shard_bytes) {
                shard.close();
                shard.open(dir / shard_name(++shard_index), std::ios::binary | std::ios::trunc);
                if (!shard) throw DataError("cannot create shard in " + dir.string());
                offset = 0;
            }
            ByteWriter header;
            header.put<std::uint32_t>(kRecordMagic);
            header.put<std::uint64_t>(payload.size());
            header.put<std::uint32_t>(crc32_of(payload));
            shard.write(reinterpret_cast<const char*>(header.bytes.data()), header.bytes.size());
            shard.write(reinterpret_cast<const char*>(payload.data()), payload.size());
            if (!shard) throw DataError("shard write failed in " + dir.string());
            manifest.push_back({shard_name(shard_index), offset, kHeaderBytes + payload.size(), scene.id, i});
            offset += kHeaderBytes + payload.size();
        }
    }
    shard.close();
    std::ofstream m(dir / "manifest.jsonl", std::ios::trunc);
    if (!m) throw DataError("cannot write manifest in " + dir.string());
    for (const auto& loc : manifest)
        m << json{{"format_version", kShardFormatVersion}, {"shard", loc.shard},   {"offset", loc.offset},
                  {"length", loc.length},                   {"scene", loc.scene},   {"frame", loc.frame}}
                 .dump()
          << "\n";
    return manifest;
}

std::vector<ShardLocation> read_manifest(const fs::path& manifest) {
    std::ifstream is(manifest);
    if (!is) throw DataError("cannot open manifest " + manifest.string());
    std::vector<ShardLocation> out;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            if (j.at("format_version").get<int>() != kShardFormatVersion)
                throw DataError("unsupported format_version");
            out.push_back({j.at("shard").get<std::string>(), j.at("offset").get<std::uint64_t>(),
                           j.at("length").get<std::uint64_t>(), j.at("scene").get<std::string>(),
                           j.at("frame").get<int>()});
        } catch (const std::exception& e) {
            throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

FrameRecord read_record(const fs::path& dir, const ShardLocation& loc) {
    std::ifstream is(dir / loc.shard, std::ios::binary);
    if (!is) throw ShardError(loc.shard, loc.offset, "cannot open shard");
    is.seekg(static_cast<std::streamoff>(loc.offset));
    std::vector<std::uint8_t> header(kHeaderBytes);
    if (!is.read(reinterpret_cast<char*>(header.data()), kHeaderBytes))
        throw ShardError(loc.shard, loc.offset, "truncated record header");
    ByteReader h(header.data(), header.size());
    if (h.get<std::uint32_t>() != kRecordMagic) throw ShardError(loc.shard, loc.offset, "bad record magic");
    const auto length = h.get<std::uint64_t>();
    const auto crc = h.get<std::uint32_t>();
    if (kHeaderBytes + length != loc.length) throw ShardError(loc.shard, loc.offset, "length disagrees with manifest");
    std::vector<std::uint8_t> payload(length);
    if (!is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(length)))
        throw ShardError(loc.shard, loc.offset, "truncated record payload");
    if (crc32_of(payload) != crc) throw ShardError(loc.shard, loc.offset, "CRC mismatch");
    try {
        FrameRecord rec = decode_payload(payload);
        if (rec.scene != loc.scene || rec.frame != loc.frame)
            throw DataError("record identity disagrees with manifest");
        return rec;
    } catch (const ShardError&) {
        throw;
    } catch (const std::exception& e) {
        throw ShardError(loc.shard, loc.offset, e.what());
    }
}

ShardReadReport read_shards(const fs::path& manifest) {
    const fs::path dir = manifest.parent_path();
    ShardReadReport report;
    std::map<std::string, std::size_t> index;
    for (const auto& loc : read_manifest(manifest)) {
        try {
            FrameRecord rec = read_record(dir, loc);
            auto it = index.find(rec.scene);
            if (it == index.end()) {
                it = index.emplace(rec.scene, report.scenes.size()).first;
                SceneRecord s;
                s.id = rec.scene;
                s.metric = rec.metric;
                s.dynamic = rec.dynamic;
                report.scenes.push_back(std::move(s));
            }
            auto& frames = report.scenes[it->second].frames;
            if (static_cast<int>(frames.size()) != rec.frame)
                throw ShardError(loc.shard, loc.offset, "frames of a scene are not contiguous in the manifest");
            frames.push_back(std::move(rec.data));
        } catch (const std::exception& e) {
            report.errors.push_back(e.what());
        }
    }
    return report;
}

void write_pair_manifest(const fs::path& path, const std::vector<CuratedSample>& samples) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    for (const auto& s : samples)
        os << json{{"format_version", kShardFormatVersion}, {"scene", s.scene}, {"target", s.target},
                   {"conditioning", s.conditioning},         {"task", task_name(s.task)}}
                  .dump()
           << "\n";
}

std::vector<CuratedSample> read_pair_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    std::vector<CuratedSample> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (j.at("format_version").get<int>() != kShardFormatVersion) throw DataError("unsupported pair manifest version");
        out.push_back({j.at("scene").get<std::string>(), j.at("target").get<int>(),
                       j.at("conditioning").get<std::vector<int>>(), parse_task(j.at("task").get<std::string>())});
    }
    return out;
}

}  // namespace raydiff
