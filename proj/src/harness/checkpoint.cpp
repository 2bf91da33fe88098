#include "icd/harness/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace icd {

CheckpointError::CheckpointError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

namespace {

constexpr char kMagic[4] = {'I', 'C', 'D', 'C'};

template <class T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    template <class T>
    T get_le(const char* what) {
        need(sizeof(T), what);
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return v;
    }

    std::string get_bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError(std::string("truncated checkpoint while reading ") + what, pos_);
        }
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
    std::string out(kMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + t.name);
        if (t.tensor.dim() > 0xff) throw std::invalid_argument("too many dims in " + t.name);
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
        out += t.name;
        out.push_back(static_cast<char>(t.tensor.dim()));
        for (auto d : t.tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : t.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.get_bytes(4, "magic") != std::string(kMagic, 4)) throw CheckpointError("bad magic", 0);
    const std::size_t version_at = r.pos();
    const auto version = r.get_le<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version), version_at);
    }
    const auto count = r.get_le<std::uint32_t>("tensor count");
    std::vector<NamedTensor> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto name_len = r.get_le<std::uint16_t>("name length");
        std::string name = r.get_bytes(name_len, "name");
        const std::size_t ndim_at = r.pos();
        const auto ndim = r.get_le<std::uint8_t>("ndim");
        if (ndim == 0) throw CheckpointError("tensor '" + name + "' has zero dims", ndim_at);
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint8_t i = 0; i < ndim; ++i) {
            const std::size_t dim_at = r.pos();
            const auto d = r.get_le<std::uint32_t>("dims");
            if (d == 0) throw CheckpointError("tensor '" + name + "' has a zero extent", dim_at);
            shape.push_back(d);
            numel *= d;
            if (numel > (bytes.size() / 8) + 1) {
                throw CheckpointError("tensor '" + name + "' larger than the file", dim_at);
            }
        }
        std::vector<double> data(numel);
        for (auto& v : data) v = std::bit_cast<double>(r.get_le<std::uint64_t>("data"));
        out.push_back({std::move(name), Tensor::from(shape, std::move(data))});
    }
    if (!r.done()) throw CheckpointError("trailing bytes after last tensor", r.pos());
    return out;
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    const std::string bytes = encode_checkpoint(tensors);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

void restore_group(ParamGroup& group, const std::vector<NamedTensor>& tensors, const std::string& prefix) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.tensor;
    for (const auto& p : group.params()) {
        const auto it = by_name.find(prefix + p.name);
        if (it == by_name.end()) {
            throw std::runtime_error("checkpoint is missing '" + prefix + p.name + "'");
        }
        if (it->second->shape() != p.tensor.shape()) {
            throw std::runtime_error("checkpoint tensor '" + prefix + p.name + "' has shape " +
                                     shape_str(it->second->shape()) + ", expected " +
                                     shape_str(p.tensor.shape()));
        }
    }
    for (const auto& p : group.params()) {
        const Tensor& src = *by_name.at(prefix + p.name);
        std::copy(src.data().begin(), src.data().end(), p.tensor.impl()->data.begin());
    }
}

namespace {

Tensor detector_meta(const DetectorConfig& c) {
    std::vector<double> m{static_cast<double>(c.image_size), static_cast<double>(c.in_channels),
                          static_cast<double>(c.stem_width), static_cast<double>(c.stage_width),
                          static_cast<double>(c.channels),   static_cast<double>(c.num_classes)};
    for (auto s : c.strides) m.push_back(static_cast<double>(s));
    const Shape shape{m.size()};
    return Tensor::from(shape, std::move(m));
}

}  // namespace

std::vector<NamedTensor> detector_tensors(const ToyDetector& det) {
    std::vector<NamedTensor> out{{"meta.detector", detector_meta(det.config())}};
    for (const auto& p : det.params().params()) out.push_back({p.name, p.tensor.clone()});
    return out;
}

void save_detector(const std::string& path, const ToyDetector& det) {
    save_checkpoint(path, detector_tensors(det));
}

std::unique_ptr<ToyDetector> detector_from_tensors(const std::vector<NamedTensor>& tensors, Group group) {
    const Tensor* meta = nullptr;
    for (const auto& t : tensors) {
        if (t.name == "meta.detector") meta = &t.tensor;
    }
    if (!meta || meta->numel() < 7) throw std::runtime_error("checkpoint has no detector metadata");
    auto at = [&](std::size_t i) { return static_cast<std::size_t>(meta->at(i)); };
    DetectorConfig c;
    c.image_size = at(0);
    c.in_channels = at(1);
    c.stem_width = at(2);
    c.stage_width = at(3);
    c.channels = at(4);
    c.num_classes = at(5);
    c.strides.clear();
    for (std::size_t i = 6; i < meta->numel(); ++i) c.strides.push_back(at(i));
    Rng rng(0);
    auto det = std::make_unique<ToyDetector>(c, group, rng);
    restore_group(det->params(), tensors);
    if (group == Group::teacher) det->params().freeze();
    return det;
}

std::unique_ptr<ToyDetector> load_detector(const std::string& path, Group group) {
    return detector_from_tensors(load_checkpoint(path), group);
}

std::vector<NamedTensor> stats_tensors(const DatasetStats& s) {
    const std::size_t c = s.class_freq.size();
    std::vector<double> freq, wm, ws, hm, hs;
    for (std::size_t k = 0; k < c; ++k) {
        freq.push_back(static_cast<double>(s.class_freq[k]));
        wm.push_back(s.width_px[k].mean);
        ws.push_back(s.width_px[k].std);
        hm.push_back(s.height_px[k].mean);
        hs.push_back(s.height_px[k].std);
    }
    return {
        {"stats.meta", Tensor::from({2}, {static_cast<double>(s.total), static_cast<double>(s.image_size)})},
        {"stats.class_freq", Tensor::from({c}, freq)},
        {"stats.width_mean", Tensor::from({c}, wm)},
        {"stats.width_std", Tensor::from({c}, ws)},
        {"stats.height_mean", Tensor::from({c}, hm)},
        {"stats.height_std", Tensor::from({c}, hs)},
    };
}

DatasetStats stats_from_tensors(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const Tensor*> by;
    for (const auto& t : tensors) by[t.name] = &t.tensor;
    auto get = [&](const char* n) -> const Tensor& {
        const auto it = by.find(n);
        if (it == by.end()) throw std::runtime_error(std::string("checkpoint is missing ") + n);
        return *it->second;
    };
    DatasetStats s;
    const Tensor& meta = get("stats.meta");
    s.total = static_cast<std::size_t>(meta.at(0));
    s.image_size = static_cast<std::size_t>(meta.at(1));
    const Tensor& f = get("stats.class_freq");
    for (std::size_t k = 0; k < f.numel(); ++k) {
        s.class_freq.push_back(static_cast<std::size_t>(f.at(k)));
        s.width_px.push_back({get("stats.width_mean").at(k), get("stats.width_std").at(k)});
        s.height_px.push_back({get("stats.height_mean").at(k), get("stats.height_std").at(k)});
    }
    return s;
}

}  // namespace icd
