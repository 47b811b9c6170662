#include "mthd/checkpoint.hpp"

#include "mthd/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mthd {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'H', 'D', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void write_block(std::ofstream& out, const Vector<float>& v) {
  const auto n = static_cast<std::uint64_t>(v.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
}

Vector<float> read_block(std::ifstream& in, const std::filesystem::path& path) {
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n > (1ULL << 34)) throw SchemaMismatch("truncated checkpoint: " + path.string());
  Vector<float> v(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw SchemaMismatch("truncated checkpoint: " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nlohmann::json header;
  header["schema_version"] = kCheckpointSchemaVersion;
  header["scalar"] = "float32";
  header["model"] = ckpt.student.config;
  header["step"] = ckpt.step;
  header["phase"] = ckpt.phase;
  header["optimizer"] = {{"name", ckpt.optimizer_name}, {"step", ckpt.optimizer.step}};
  header["has_teacher"] = ckpt.teacher.has_value();
  header["has_optimizer_state"] = ckpt.optimizer.first_moment.size() > 0;
  header["train_config"] = ckpt.train_config;
  const std::string text = header.dump();

  // Write to a sibling file, then rename, so readers never see a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const auto len = static_cast<std::uint64_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_block(out, ckpt.student.values);
    if (ckpt.teacher) write_block(out, *ckpt.teacher);
    if (ckpt.optimizer.first_moment.size() > 0) {
      write_block(out, ckpt.optimizer.first_moment);
      write_block(out, ckpt.optimizer.second_moment);
    }
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint: " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw SchemaMismatch("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 26)) throw SchemaMismatch("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));

  Checkpoint ckpt;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    if (header.at("schema_version") != kCheckpointSchemaVersion)
      throw SchemaMismatch("checkpoint schema_version mismatch: " + path.string());
    ckpt.student.config = header.at("model").get<ModelConfig>();
    ckpt.step = header.at("step").get<long>();
    ckpt.phase = header.at("phase").get<std::string>();
    ckpt.optimizer_name = header.at("optimizer").at("name").get<std::string>();
    ckpt.optimizer.step = header.at("optimizer").at("step").get<long>();
    ckpt.train_config = header.value("train_config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaMismatch("bad checkpoint header in " + path.string() + ": " + e.what());
  }

  ckpt.student.values = read_block(in, path);
  const auto expected = make_layout(ckpt.student.config).parameter_count;
  if (ckpt.student.values.size() != expected)
    throw SchemaMismatch("checkpoint parameter count does not match its model config");
  if (header.value("has_teacher", false)) ckpt.teacher = read_block(in, path);
  if (header.value("has_optimizer_state", false)) {
    ckpt.optimizer.first_moment = read_block(in, path);
    ckpt.optimizer.second_moment = read_block(in, path);
  }
  return ckpt;
}

}  // namespace mthd
