#include "roiformer/io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace roiformer {

namespace {

void append_u32(std::string& out, uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    out.append(b, 4);
}

uint32_t read_u32(const char* p) {
    return static_cast<uint32_t>(static_cast<unsigned char>(p[0])) |
           (static_cast<uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
           (static_cast<uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
           (static_cast<uint32_t>(static_cast<unsigned char>(p[3])) << 24);
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_all(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValueError("cannot write file: " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace

std::string rtns_encode(const Tensor<float>& t) {
    std::string out = "RTNS";
    out.push_back(1);
    append_u32(out, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape) append_u32(out, static_cast<uint32_t>(d));
    // little-endian 32-bit floats; x86 host matches the wire layout
    static_assert(sizeof(float) == 4);
    const size_t off = out.size();
    out.resize(off + t.data.size() * 4);
    std::memcpy(out.data() + off, t.data.data(), t.data.size() * 4);
    return out;
}

Tensor<float> rtns_decode(const char* data, size_t size, size_t* consumed) {
    if (size < 9 || std::memcmp(data, "RTNS", 4) != 0)
        throw ValueError("rtns: bad magic");
    if (data[4] != 1) throw ValueError("rtns: unsupported version");
    const uint32_t rank = read_u32(data + 5);
    if (rank > 8) throw ValueError("rtns: implausible rank");
    size_t pos = 9;
    if (size < pos + rank * 4) throw ValueError("rtns: truncated header");
    std::vector<int> shape;
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        const uint32_t d = read_u32(data + pos);
        pos += 4;
        shape.push_back(static_cast<int>(d));
        n *= d;
    }
    if (size < pos + static_cast<size_t>(n) * 4) throw ValueError("rtns: truncated data");
    Tensor<float> t(shape);
    std::memcpy(t.data.data(), data + pos, static_cast<size_t>(n) * 4);
    pos += static_cast<size_t>(n) * 4;
    if (consumed) *consumed = pos;
    return t;
}

void rtns_write(const std::string& path, const Tensor<float>& t) {
    write_all(path, rtns_encode(t));
}

Tensor<float> rtns_read(const std::string& path) {
    const std::string data = read_all(path);
    return rtns_decode(data.data(), data.size());
}

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

namespace {
unsigned char to_byte(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}
}  // namespace

void ppm_write(const std::string& path, const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("ppm_write: need [3,H,W]");
    const int h = image.dim(1), w = image.dim(2);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<size_t>(3) * h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(image(c, y, x))));
    write_all(path, out);
}

namespace {
// Skips whitespace and comments in a PNM header.
void pnm_skip(std::istringstream& in) {
    while (true) {
        while (std::isspace(in.peek())) in.get();
        if (in.peek() == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            break;
        }
    }
}
}  // namespace

Tensor<float> ppm_read(const std::string& path) {
    const std::string data = read_all(path);
    std::istringstream in(data);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw ValueError("ppm_read: not a binary PPM");
    pnm_skip(in);
    int w, h, maxv;
    in >> w;
    pnm_skip(in);
    in >> h;
    pnm_skip(in);
    in >> maxv;
    in.get();  // the single whitespace after maxval
    if (maxv != 255) throw ValueError("ppm_read: only maxval 255 supported");
    Tensor<float> img({3, h, w});
    const size_t start = static_cast<size_t>(in.tellg());
    if (data.size() < start + static_cast<size_t>(3) * h * w)
        throw ValueError("ppm_read: truncated pixel data");
    size_t pos = start;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img(c, y, x) = static_cast<unsigned char>(data[pos++]) / 255.0f;
    return img;
}

void pgm_write(const std::string& path, const Tensor<float>& gray) {
    if (gray.rank() != 3 || gray.dim(0) != 1) throw ShapeError("pgm_write: need [1,H,W]");
    const int h = gray.dim(1), w = gray.dim(2);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.push_back(static_cast<char>(to_byte(gray(0, y, x))));
    write_all(path, out);
}

void pgm_write_normalized(const std::string& path, const Tensor<float>& values) {
    float lo = values.data[0], hi = values.data[0];
    for (float v : values.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float span = hi - lo > 0 ? hi - lo : 1.0f;
    Tensor<float> norm = values;
    for (auto& v : norm.data) v = (v - lo) / span;
    pgm_write(path, norm);
}

Tensor<float> pgm_read(const std::string& path) {
    const std::string data = read_all(path);
    std::istringstream in(data);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw ValueError("pgm_read: not a binary PGM");
    pnm_skip(in);
    int w, h, maxv;
    in >> w;
    pnm_skip(in);
    in >> h;
    pnm_skip(in);
    in >> maxv;
    in.get();
    if (maxv != 255) throw ValueError("pgm_read: only maxval 255 supported");
    Tensor<float> img({1, h, w});
    size_t pos = static_cast<size_t>(in.tellg());
    if (data.size() < pos + static_cast<size_t>(h) * w)
        throw ValueError("pgm_read: truncated pixel data");
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img(0, y, x) = static_cast<unsigned char>(data[pos++]) / 255.0f;
    return img;
}

// ---------------------------------------------------------------------------
// Camera/pose fixture
// ---------------------------------------------------------------------------

void camera_fixture_write(const std::string& path, const CameraFixture& f) {
    std::ostringstream out;
    out.precision(17);
    out << "fx= " << f.cam.fx << "\n";
    out << "fy= " << f.cam.fy << "\n";
    out << "cx= " << f.cam.cx << "\n";
    out << "cy= " << f.cam.cy << "\n";
    for (const auto& p : f.poses)
        out << "pose = " << p.rotation.x << " " << p.rotation.y << " " << p.rotation.z << " "
            << p.translation.x << " " << p.translation.y << " " << p.translation.z << "\n";
    write_all(path, out.str());
}

CameraFixture camera_fixture_read(const std::string& path) {
    std::istringstream in(read_all(path));
    CameraFixture f;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key.empty() || key[0] == '#') continue;
        if (key == "pose") {
            std::string eq;
            ls >> eq;
            Pose<double> p;
            ls >> p.rotation.x >> p.rotation.y >> p.rotation.z >> p.translation.x >>
                p.translation.y >> p.translation.z;
            if (!ls) throw ValueError("camera fixture: malformed pose line");
            f.poses.push_back(p);
            continue;
        }
        // keys written as "fx=" possibly with the value attached
        auto parse = [&](const char* name, double& dst) {
            if (key.rfind(name, 0) != 0) return false;
            std::string rest = key.substr(std::strlen(name));
            if (rest.empty()) ls >> dst;
            else dst = std::stod(rest);
            return true;
        };
        if (parse("fx=", f.cam.fx) || parse("fy=", f.cam.fy) || parse("cx=", f.cam.cx) ||
            parse("cy=", f.cam.cy))
            continue;
    }
    if (!(f.cam.fx > 0) || !(f.cam.fy > 0))
        throw ValueError("camera fixture: focal lengths must be positive");
    return f;
}

// ---------------------------------------------------------------------------
// Checkpoint: "RCKP" 1, u32 config_len, config, u32 manifest_len, manifest,
// then RTNS blobs at the absolute offsets recorded in the manifest. Manifest
// lines: name offset rank dim0 dim1 ...
// ---------------------------------------------------------------------------

void checkpoint_save(const std::string& path, const CheckpointData& data) {
    std::vector<std::string> blobs;
    blobs.reserve(data.tensors.size());
    for (const auto& [name, t] : data.tensors) blobs.push_back(rtns_encode(t));

    // manifest offsets depend on the manifest size; lay out with a fixed-width
    // pass: build manifest with placeholder offsets first to learn its length
    auto build_manifest = [&](size_t blob_start) {
        std::ostringstream m;
        size_t off = blob_start;
        for (size_t i = 0; i < data.tensors.size(); ++i) {
            const auto& [name, t] = data.tensors[i];
            m << name << " " << off;
            m << " " << t.rank();
            for (int d : t.shape) m << " " << d;
            m << "\n";
            off += blobs[i].size();
        }
        return m.str();
    };
    // iterate to a fixed point (manifest length affects offsets' digit count)
    size_t header = 4 + 1 + 4 + data.config_text.size() + 4;
    std::string manifest = build_manifest(0);
    for (int iter = 0; iter < 8; ++iter) {
        const std::string next = build_manifest(header + manifest.size());
        if (next.size() == manifest.size()) {
            manifest = next;
            break;
        }
        manifest = next;
    }

    std::string out = "RCKP";
    out.push_back(1);
    append_u32(out, static_cast<uint32_t>(data.config_text.size()));
    out += data.config_text;
    append_u32(out, static_cast<uint32_t>(manifest.size()));
    out += manifest;
    for (const auto& b : blobs) out += b;
    write_all(path, out);
}

CheckpointData checkpoint_load(const std::string& path) {
    const std::string data = read_all(path);
    if (data.size() < 9 || data.compare(0, 4, "RCKP") != 0)
        throw ValueError("checkpoint: bad magic");
    if (data[4] != 1) throw ValueError("checkpoint: unsupported version");
    size_t pos = 5;
    const uint32_t clen = read_u32(data.data() + pos);
    pos += 4;
    if (data.size() < pos + clen + 4) throw ValueError("checkpoint: truncated config");
    CheckpointData out;
    out.config_text = data.substr(pos, clen);
    pos += clen;
    const uint32_t mlen = read_u32(data.data() + pos);
    pos += 4;
    if (data.size() < pos + mlen) throw ValueError("checkpoint: truncated manifest");
    std::istringstream manifest(data.substr(pos, mlen));
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name;
        size_t off;
        int rank;
        ls >> name >> off >> rank;
        if (!ls) throw ValueError("checkpoint: malformed manifest line");
        if (off >= data.size()) throw ValueError("checkpoint: offset out of range");
        out.tensors.emplace_back(name, rtns_decode(data.data() + off, data.size() - off));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ConfigFile
// ---------------------------------------------------------------------------

namespace {
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}
}  // namespace

ConfigFile ConfigFile::parse_string(const std::string& text) {
    ConfigFile cf;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ValueError("config: malformed section at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            cf.sections_[section];
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config: expected key=value at line " + std::to_string(lineno));
        cf.sections_[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return cf;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
    return parse_string(read_all(path));
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key,
                                   const std::string& fallback) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
}

int ConfigFile::get_int(const std::string& section, const std::string& key, int fallback) const {
    const std::string v = get_string(section, key, "");
    return v.empty() ? fallback : std::stoi(v);
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
    const std::string v = get_string(section, key, "");
    return v.empty() ? fallback : std::stod(v);
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key,
                          bool fallback) const {
    std::string v = get_string(section, key, "");
    if (v.empty()) return fallback;
    std::transform(v.begin(), v.end(), v.begin(), ::tolower);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ValueError("config: bad boolean for " + section + "." + key + ": " + v);
}

std::vector<int> ConfigFile::get_int_list(const std::string& section, const std::string& key,
                                          const std::vector<int>& fallback) const {
    const std::string v = get_string(section, key, "");
    if (v.empty()) return fallback;
    std::vector<int> out;
    std::istringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(std::stoi(tok));
    }
    return out;
}

std::vector<double> ConfigFile::get_double_list(const std::string& section, const std::string& key,
                                                const std::vector<double>& fallback) const {
    const std::string v = get_string(section, key, "");
    if (v.empty()) return fallback;
    std::vector<double> out;
    std::istringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(std::stod(tok));
    }
    return out;
}

void ConfigFile::set(const std::string& section, const std::string& key,
                     const std::string& value) {
    sections_[section][key] = value;
}

std::string ConfigFile::serialize() const {
    std::ostringstream out;
    for (const auto& [sec, kv] : sections_) {
        if (!sec.empty()) out << "[" << sec << "]\n";
        for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
        out << "\n";
    }
    return out.str();
}

}  // namespace roiformer
