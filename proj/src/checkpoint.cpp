#include "pmtl/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "pmtl/common.hpp"

namespace pmtl {

namespace {

constexpr char kMagic[8] = {'P', 'M', 'T', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
    std::string buf;

    void raw(const void* p, std::size_t n) {
        buf.append(static_cast<const char*>(p), n);
    }
    void u32(std::uint32_t v) { raw(&v, sizeof(v)); }
    void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
    void i64(std::int64_t v) { raw(&v, sizeof(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void scalars(const std::vector<Scalar>& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(Scalar));
    }
};

struct Reader {
    const char* p;
    std::size_t size;
    std::size_t pos = 0;
    std::size_t base_offset;  // file offset of body start, for error reporting

    void need(std::size_t n, const char* what) {
        if (pos + n > size) {
            throw IntegrityError(std::string("checkpoint truncated while reading ") + what,
                                 base_offset + pos);
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, p + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, p + pos, 8);
        pos += 8;
        return v;
    }
    std::int64_t i64(const char* what) {
        need(8, what);
        std::int64_t v;
        std::memcpy(&v, p + pos, 8);
        pos += 8;
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(p + pos, n);
        pos += n;
        return s;
    }
    std::vector<Scalar> scalars(const char* what) {
        const std::uint64_t n = u64(what);
        need(n * sizeof(Scalar), what);
        std::vector<Scalar> v(n);
        std::memcpy(v.data(), p + pos, n * sizeof(Scalar));
        pos += n * sizeof(Scalar);
        return v;
    }
};

}  // namespace

void save_checkpoint(const CheckpointData& data, const std::string& path) {
    Writer body;
    body.str(data.config_text);
    body.i64(data.epoch);
    body.i64(data.adam_step);
    body.str(data.rng_state);
    body.u32(static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& [name, t] : data.tensors) {
        body.str(name);
        body.u32(static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) body.u32(static_cast<std::uint32_t>(d));
        body.scalars(t.vec());
    }
    body.u32(static_cast<std::uint32_t>(data.adam_state.size()));
    for (const auto& [name, v] : data.adam_state) {
        body.str(name);
        body.scalars(v);
    }

    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.buf.data()),
              static_cast<uInt>(body.buf.size())));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kVersion;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t body_size = body.buf.size();
    f.write(reinterpret_cast<const char*>(&body_size), sizeof(body_size));
    f.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    f.write(body.buf.data(), static_cast<std::streamsize>(body.buf.size()));
    if (!f) throw IoError("checkpoint write failed: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string contents((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    constexpr std::size_t header_size = sizeof(kMagic) + 4 + 8 + 4;
    if (contents.size() < header_size) {
        throw IntegrityError("checkpoint shorter than header", contents.size());
    }
    if (std::memcmp(contents.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IntegrityError("bad checkpoint magic", 0);
    }
    std::uint32_t version;
    std::memcpy(&version, contents.data() + sizeof(kMagic), 4);
    if (version != kVersion) {
        throw IntegrityError("unsupported checkpoint version " + std::to_string(version),
                             sizeof(kMagic));
    }
    std::uint64_t body_size;
    std::memcpy(&body_size, contents.data() + sizeof(kMagic) + 4, 8);
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, contents.data() + sizeof(kMagic) + 12, 4);
    if (contents.size() != header_size + body_size) {
        throw IntegrityError("checkpoint body size mismatch (header says " +
                                 std::to_string(body_size) + " bytes, file has " +
                                 std::to_string(contents.size() - header_size) + ")",
                             contents.size());
    }
    const char* body = contents.data() + header_size;
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body), static_cast<uInt>(body_size)));
    if (crc != stored_crc) {
        throw IntegrityError("checkpoint checksum mismatch", header_size);
    }

    Reader r{body, static_cast<std::size_t>(body_size), 0, header_size};
    CheckpointData data;
    data.version = version;
    data.config_text = r.str("config");
    data.epoch = r.i64("epoch");
    data.adam_step = r.i64("adam step");
    data.rng_state = r.str("rng state");
    const std::uint32_t n_tensors = r.u32("tensor count");
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str("tensor name");
        const std::uint32_t ndim = r.u32("tensor rank");
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(static_cast<int>(r.u32("tensor dim")));
        }
        std::vector<Scalar> values = r.scalars("tensor data");
        if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
            throw IntegrityError("tensor '" + name + "' data does not match its shape",
                                 r.base_offset + r.pos);
        }
        data.tensors.emplace_back(std::move(name),
                                  Tensor::from_vector(std::move(values), std::move(shape)));
    }
    const std::uint32_t n_opt = r.u32("optimizer entry count");
    for (std::uint32_t i = 0; i < n_opt; ++i) {
        std::string name = r.str("optimizer entry name");
        data.adam_state.emplace_back(std::move(name), r.scalars("optimizer entry data"));
    }
    if (r.pos != r.size) {
        throw IntegrityError("checkpoint has trailing bytes", r.base_offset + r.pos);
    }
    return data;
}

}  // namespace pmtl
