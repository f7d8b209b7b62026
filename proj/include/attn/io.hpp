#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "attn/common.hpp"

namespace attn {

nlohmann::json mat_json(const Mat& a);
Mat json_mat(const nlohmann::json& j, Eigen::Index r, Eigen::Index c);
std::vector<double> vec_std(const Vec& v);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

// SHA-1 of "blob <size>\0<content>", as git computes it.
std::string git_blob_sha1(const std::string& content);

}  // namespace attn
