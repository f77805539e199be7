#include "calvaria/core/volume_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little,
              "volume container assumes a little-endian host");

namespace calvaria {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Header {
    Shape3 shape;
    Spacing3 spacing_mm;
    std::string modality;
    std::string dtype;
};

fs::path strip_suffix(fs::path p) {
    std::string s = p.string();
    for (const char* suf : {".vol.gz", ".vol", ".json"}) {
        if (s.size() > std::strlen(suf) && s.ends_with(suf)) {
            return fs::path(s.substr(0, s.size() - std::strlen(suf)));
        }
    }
    return p;
}

void write_sidecar(const fs::path& base, const Header& h) {
    json j;
    j["shape"] = {h.shape[0], h.shape[1], h.shape[2]};
    j["spacing_mm"] = {h.spacing_mm[0], h.spacing_mm[1], h.spacing_mm[2]};
    j["modality"] = h.modality;
    j["dtype"] = h.dtype;
    j["version"] = 1;
    std::ofstream out(base.string() + ".json");
    if (!out) {
        throw FormatError("cannot open for writing: " + base.string() + ".json");
    }
    out << j.dump(2) << "\n";
}

Header read_sidecar(const fs::path& base) {
    std::ifstream in(base.string() + ".json");
    if (!in) {
        throw FormatError("missing sidecar: " + base.string() + ".json");
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad sidecar json: " + std::string(e.what()));
    }
    if (!j.contains("version") || !j["version"].is_number_integer()) {
        throw VersionError("sidecar missing version field");
    }
    if (j["version"].get<int>() != 1) {
        throw VersionError("unsupported container version " +
                           std::to_string(j["version"].get<int>()));
    }
    Header h;
    auto sh = j.at("shape");
    auto sp = j.at("spacing_mm");
    if (sh.size() != 3 || sp.size() != 3) {
        throw FormatError("shape/spacing_mm must have 3 entries");
    }
    for (int a = 0; a < 3; ++a) {
        h.shape[a] = sh[a].get<int>();
        h.spacing_mm[a] = sp[a].get<double>();
    }
    h.modality = j.at("modality").get<std::string>();
    h.dtype = j.at("dtype").get<std::string>();
    return h;
}

void write_payload(const fs::path& base, const void* bytes, std::size_t n, bool compress) {
    if (compress) {
        const std::string path = base.string() + ".vol.gz";
        gzFile gz = gzopen(path.c_str(), "wb");
        if (!gz) {
            throw FormatError("cannot open for writing: " + path);
        }
        const char* p = static_cast<const char*>(bytes);
        std::size_t off = 0;
        while (off < n) {
            const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n - off, 1u << 28));
            if (gzwrite(gz, p + off, chunk) != static_cast<int>(chunk)) {
                gzclose(gz);
                throw FormatError("gzwrite failed: " + path);
            }
            off += chunk;
        }
        gzclose(gz);
    } else {
        std::ofstream out(base.string() + ".vol", std::ios::binary);
        if (!out) {
            throw FormatError("cannot open for writing: " + base.string() + ".vol");
        }
        out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
        if (!out) {
            throw FormatError("short write: " + base.string() + ".vol");
        }
    }
}

std::vector<char> read_payload(const fs::path& base) {
    const fs::path raw = base.string() + ".vol";
    if (fs::exists(raw)) {
        std::ifstream in(raw, std::ios::binary | std::ios::ate);
        if (!in) {
            throw FormatError("cannot open: " + raw.string());
        }
        const auto n = static_cast<std::size_t>(in.tellg());
        in.seekg(0);
        std::vector<char> bytes(n);
        in.read(bytes.data(), static_cast<std::streamsize>(n));
        if (!in) {
            throw FormatError("short read: " + raw.string());
        }
        return bytes;
    }
    const fs::path gzpath = base.string() + ".vol.gz";
    if (!fs::exists(gzpath)) {
        throw FormatError("missing payload: " + raw.string() + "(.gz)");
    }
    gzFile gz = gzopen(gzpath.string().c_str(), "rb");
    if (!gz) {
        throw FormatError("cannot open: " + gzpath.string());
    }
    std::vector<char> bytes;
    char buf[1 << 16];
    int got;
    while ((got = gzread(gz, buf, sizeof buf)) > 0) {
        bytes.insert(bytes.end(), buf, buf + got);
    }
    const bool bad = got < 0;
    gzclose(gz);
    if (bad) {
        throw FormatError("gzread failed: " + gzpath.string());
    }
    return bytes;
}

void check_payload_size(const Header& h, std::size_t bytes, std::size_t elem_size,
                        const fs::path& base) {
    const auto expected = static_cast<std::size_t>(voxel_count(h.shape)) * elem_size;
    if (bytes != expected) {
        throw FormatError("payload of " + base.string() + " is " + std::to_string(bytes) +
                          " bytes, header shape requires " + std::to_string(expected));
    }
}

} // namespace

void save_volume(const Volume& v, const fs::path& path, bool compress) {
    validate(v);
    const fs::path base = strip_suffix(path);
    if (base.has_parent_path()) {
        fs::create_directories(base.parent_path());
    }
    write_sidecar(base, {v.shape, v.spacing_mm, to_string(v.modality), "f32"});
    write_payload(base, v.data.data(), v.data.size() * sizeof(float), compress);
}

Volume load_volume(const fs::path& path) {
    const fs::path base = strip_suffix(path);
    const Header h = read_sidecar(base);
    if (h.dtype != "f32") {
        throw FormatError(base.string() + ": dtype " + h.dtype + ", expected f32");
    }
    if (h.modality == "LABEL") {
        throw FormatError(base.string() + ": label container loaded as intensity volume");
    }
    const auto bytes = read_payload(base);
    check_payload_size(h, bytes.size(), sizeof(float), base);
    Volume v;
    v.shape = h.shape;
    v.spacing_mm = h.spacing_mm;
    v.modality = modality_from_string(h.modality);
    v.data.resize(static_cast<std::size_t>(voxel_count(h.shape)));
    std::memcpy(v.data.data(), bytes.data(), bytes.size());
    validate(v);
    require_finite(v, "load_volume");
    return v;
}

void save_labels(const LabelMap& m, const fs::path& path, bool compress) {
    validate(m);
    const fs::path base = strip_suffix(path);
    if (base.has_parent_path()) {
        fs::create_directories(base.parent_path());
    }
    write_sidecar(base, {m.shape, m.spacing_mm, "LABEL", "u8"});
    write_payload(base, m.data.data(), m.data.size(), compress);
}

LabelMap load_labels(const fs::path& path) {
    const fs::path base = strip_suffix(path);
    const Header h = read_sidecar(base);
    if (h.dtype != "u8" || h.modality != "LABEL") {
        throw FormatError(base.string() + ": not a label container");
    }
    const auto bytes = read_payload(base);
    check_payload_size(h, bytes.size(), 1, base);
    LabelMap m;
    m.shape = h.shape;
    m.spacing_mm = h.spacing_mm;
    m.data.assign(bytes.begin(), bytes.end());
    validate(m);
    return m;
}

} // namespace calvaria
