#include "attn/io.hpp"

#include <fmt/format.h>
#include <fstream>
#include <openssl/evp.h>
#include <sstream>

namespace attn {

nlohmann::json mat_json(const Mat& a) {
  auto j = nlohmann::json::array();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < a.cols(); ++k) row.push_back(a(i, k));
    j.push_back(row);
  }
  return j;
}

Mat json_mat(const nlohmann::json& j, Eigen::Index r, Eigen::Index c) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != r) throw ValidationError("matrix row count mismatch");
  Mat a(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    if (!j[i].is_array() || static_cast<Eigen::Index>(j[i].size()) != c)
      throw ValidationError("matrix column count mismatch");
    for (Eigen::Index k = 0; k < c; ++k) a(i, k) = j[i][k].get<double>();
  }
  return a;
}

std::vector<double> vec_std(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << content;
}

std::string git_blob_sha1(const std::string& content) {
  const std::string hdr = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, hdr.data(), hdr.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

}  // namespace attn
