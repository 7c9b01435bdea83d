// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/quant/qcheckpoint.hpp"

#include <fstream>
#include <set>

#include "qsd/error.hpp"
#include "qsd/numerics/ops.hpp"
#include "qsd/numerics/serialize.hpp"

namespace qsd::quant {

double SizeReport::reduction() const {
  if (fp_payload_bits == 0) return 0.0;
  return 1.0 - static_cast<double>(payload_bits) / static_cast<double>(fp_payload_bits);
}

namespace {

std::uint64_t fp_weight_bits(const net::Denoiser& m) {
  std::uint64_t b = 0;
  for (const auto& li : m.graph().layers)
    if (li.kind != net::LayerKind::group_norm) b += 32ull * m.params().get(li.weight_name()).numel();
  return b;
}

}  // namespace

SizeReport size_bits(const net::Denoiser& m) {
  SizeReport r;
  for (const auto& li : m.graph().layers) {
    if (li.kind == net::LayerKind::group_norm) continue;
    const auto n = m.params().get(li.weight_name()).numel();
    r.tensors.push_back({li.weight_name(), n, 32, 32ull * n});
    r.payload_bits += 32ull * n;
  }
  r.fp_payload_bits = r.payload_bits;
  return r;
}

SizeReport size_bits(const QuantModel& qm) {
  if (qm.config().passthrough()) return size_bits(qm.base());
  SizeReport r;
  r.fp_payload_bits = fp_weight_bits(qm.base());
  for (const auto& q : qm.quantizers()) {
    const auto n = qm.fp_slice(q).numel();
    const auto bits = static_cast<std::uint64_t>(q.params.bits) * n;
    r.tensors.push_back({q.key, n, q.params.bits, bits});
    r.payload_bits += bits;
    r.metadata_bits += kMetadataBitsPerQuantizer;
  }
  return r;
}

SizeReport size_bits(const QuantizedCheckpoint& ck) {
  SizeReport r;
  std::set<std::string> quantized;
  for (const auto& rec : ck.records) {
    const auto n = rec.codes.size();
    const auto bits = static_cast<std::uint64_t>(rec.bits) * n;
    r.tensors.push_back({rec.key, n, rec.bits, bits});
    r.payload_bits += bits;
    r.fp_payload_bits += 32ull * n;
    r.metadata_bits += kMetadataBitsPerQuantizer;
    quantized.insert(rec.weight_name);
  }
  for (const auto& [name, t] : ck.base.params) {
    const bool is_weight = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    if (!is_weight || quantized.count(name)) continue;
    r.tensors.push_back({name, t.numel(), 32, 32ull * t.numel()});
    r.payload_bits += 32ull * t.numel();
    r.fp_payload_bits += 32ull * t.numel();
  }
  return r;
}

namespace {
constexpr char kMagic[] = "QSDQCKP1";
constexpr std::uint32_t kVersion = 1;

void write_config(std::ostream& os, const net::DenoiserConfig& c, const diffusion::NoiseSchedule& s) {
  for (auto v : {c.in_channels, c.cond_channels, c.base_width, c.depth, c.time_embed_dim}) num::write_u64(os, v);
  num::write_f64(os, c.null_cond_prob);
  num::write_u32(os, static_cast<std::uint32_t>(c.groups));
  num::write_u64(os, s.steps);
  num::write_f64(os, s.beta_start);
  num::write_f64(os, s.beta_end);
}
}  // namespace

void save_quantized(const std::filesystem::path& path, const QuantModel& qm, const diffusion::NoiseSchedule& sched) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write quantized checkpoint " + path.string());
  const auto& m = qm.base();
  os.write(kMagic, 8);
  num::write_u32(os, kVersion);
  num::write_u32(os, static_cast<std::uint32_t>(qm.config().bits));
  write_config(os, m.config(), sched);
  std::set<std::string> quantized;
  for (const auto& q : qm.quantizers()) quantized.insert(m.graph().layers[q.layer].weight_name());
  std::vector<std::string> fp;
  for (const auto& n : m.params().names())
    if (!quantized.count(n)) fp.push_back(n);
  num::write_u64(os, fp.size());
  for (const auto& n : fp) {
    num::write_string(os, n);
    num::write_tensor(os, m.params().get(n));
  }
  num::write_u64(os, qm.quantizers().size());
  for (const auto& q : qm.quantizers()) {
    const Tensor w = qm.fp_slice(q);
    const auto codes = integer_codes(w, q.params);
    num::write_string(os, q.key);
    num::write_string(os, m.graph().layers[q.layer].weight_name());
    num::write_u64(os, q.begin);
    num::write_u64(os, q.end);
    num::write_u32(os, static_cast<std::uint32_t>(q.params.bits));
    num::write_f32(os, q.params.scale);
    num::write_u32(os, static_cast<std::uint32_t>(q.params.c_min));
    num::write_u32(os, static_cast<std::uint32_t>(q.params.c_max));
    num::write_u64(os, w.rank());
    for (auto d : w.shape()) num::write_u64(os, d);
    const auto bytes = pack_codes(codes, q.params.bits);
    num::write_u64(os, bytes.size());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

QuantizedCheckpoint load_quantized(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError(path.string(), "quantized checkpoint not found: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != std::string(kMagic, 8))
    throw IoError("quantized checkpoint " + path.string() + ": bad magic");
  if (num::read_u32(is) != kVersion) throw IoError("quantized checkpoint: unsupported version");
  QuantizedCheckpoint ck;
  ck.bits = static_cast<int>(num::read_u32(is));
  auto& c = ck.base.config;
  for (auto* v : {&c.in_channels, &c.cond_channels, &c.base_width, &c.depth, &c.time_embed_dim})
    *v = num::read_u64(is);
  c.null_cond_prob = num::read_f64(is);
  c.groups = static_cast<int>(num::read_u32(is));
  ck.base.schedule_steps = num::read_u64(is);
  ck.base.beta_start = num::read_f64(is);
  ck.base.beta_end = num::read_f64(is);
  const auto nfp = num::read_u64(is);
  if (nfp > 100000) throw IoError("quantized checkpoint: implausible tensor count");
  for (std::uint64_t i = 0; i < nfp; ++i) {
    auto name = num::read_string(is);
    ck.base.params.emplace(std::move(name), num::read_tensor(is));
  }
  const auto nrec = num::read_u64(is);
  if (nrec > 100000) throw IoError("quantized checkpoint: implausible record count");
  std::map<std::string, std::vector<Tensor>> parts;
  for (std::uint64_t i = 0; i < nrec; ++i) {
    QuantRecord r;
    r.key = num::read_string(is);
    r.weight_name = num::read_string(is);
    r.begin = num::read_u64(is);
    r.end = num::read_u64(is);
    r.bits = static_cast<int>(num::read_u32(is));
    r.scale = num::read_f32(is);
    r.c_min = static_cast<std::int32_t>(num::read_u32(is));
    r.c_max = static_cast<std::int32_t>(num::read_u32(is));
    const auto rank = num::read_u64(is);
    if (rank == 0 || rank > 8) throw IoError("quantized checkpoint: bad rank in " + r.key);
    r.shape.resize(rank);
    for (auto& d : r.shape) d = num::read_u64(is);
    const auto nbytes = num::read_u64(is);
    const auto count = num::numel(r.shape);
    if (r.bits < 2 || r.bits > 16 || nbytes != (count * static_cast<std::size_t>(r.bits) + 7) / 8)
      throw IoError("quantized checkpoint: payload size mismatch in " + r.key);
    std::vector<std::uint8_t> bytes(nbytes);
    if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(nbytes)))
      throw IoError("quantized checkpoint: truncated payload in " + r.key);
    r.codes = unpack_codes(bytes, count, r.bits);
    parts[r.weight_name].push_back(dequantize(r.codes, r.shape, r.scale));
    ck.records.push_back(std::move(r));
  }
  for (auto& [name, ps] : parts) {
    Tensor w = ps[0];
    for (std::size_t i = 1; i < ps.size(); ++i) w = num::concat_channels(w, ps[i]);
    ck.base.params[name] = w;
  }
  return ck;
}

}  // namespace qsd::quant
