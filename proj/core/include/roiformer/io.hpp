#pragma once

#include <map>
#include <string>

#include "roiformer/geometry.hpp"
#include "roiformer/tensor.hpp"

namespace roiformer {

// Tensor dump format: magic "RTNS", version byte 1, u32 rank, rank u32 dims,
// then raw little-endian 32-bit floats in row-major order.
void rtns_write(const std::string& path, const Tensor<float>& t);
Tensor<float> rtns_read(const std::string& path);

// In-memory encoding, shared with the checkpoint container.
std::string rtns_encode(const Tensor<float>& t);
Tensor<float> rtns_decode(const char* data, size_t size, size_t* consumed = nullptr);

template <typename T>
void rtns_write_as(const std::string& path, const Tensor<T>& t) {
    rtns_write(path, t.template cast<float>());
}

// Binary PPM (P6, color in [0,1]) and PGM (P5, single channel) images.
void ppm_write(const std::string& path, const Tensor<float>& image);  // [3,H,W]
Tensor<float> ppm_read(const std::string& path);
void pgm_write(const std::string& path, const Tensor<float>& gray);   // [1,H,W] in [0,1]
void pgm_write_normalized(const std::string& path, const Tensor<float>& values);
Tensor<float> pgm_read(const std::string& path);

// Camera/pose fixture: `fx= fy= cx= cy=` lines plus repeated
// `pose = wx wy wz tx ty tz` lines.
struct CameraFixture {
    CameraModel<double> cam;
    std::vector<Pose<double>> poses;
};
void camera_fixture_write(const std::string& path, const CameraFixture& f);
CameraFixture camera_fixture_read(const std::string& path);

// Checkpoint container: embedded config text plus named tensor dumps with a
// text manifest (name, byte offset, shape); blobs are RTNS-encoded.
struct CheckpointData {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};
void checkpoint_save(const std::string& path, const CheckpointData& data);
CheckpointData checkpoint_load(const std::string& path);

// Plain-text key=value configuration with [section] headers and # comments.
class ConfigFile {
public:
    ConfigFile() = default;
    static ConfigFile parse_file(const std::string& path);
    static ConfigFile parse_string(const std::string& text);

    bool has(const std::string& section, const std::string& key) const;
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& section, const std::string& key,
                                  const std::vector<int>& fallback) const;
    std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                        const std::vector<double>& fallback) const;

    void set(const std::string& section, const std::string& key, const std::string& value);
    std::string serialize() const;

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace roiformer
