#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "curvereg/volume.hpp"

namespace curvereg {

struct FeatureConfig {
    std::vector<double> scales_mm{3.5, 7.0, 14.0}; // Gaussian sigmas
    double cell_mm = 14.0;
    std::vector<Channel> channels{Channel::CT, Channel::PET_PREPROCESSED};
};

// Per-cell descriptors. Rows are cell locations (x-fastest), columns are descriptors ordered
// channel-major, then scale, then (mean, std, grad_x, grad_y, grad_z).
struct FeatureMap {
    std::array<int, 3> dims{0, 0, 0}; // cells along x, y, z
    Vec3 stride_mm = Vec3::Zero();
    Vec3 origin_mm = Vec3::Zero();
    Eigen::MatrixXd data; // locations x channels

    Eigen::Index locations() const noexcept { return data.rows(); }
    Eigen::Index channels() const noexcept { return data.cols(); }
};

inline constexpr int kDescriptorsPerScale = 5;

FeatureMap extract_features(const VoxelGrid &grid, const FeatureConfig &cfg = {});

// Cosine similarities between all source and target locations; zero rows stay zero.
Eigen::MatrixXd similarity_matrix(const FeatureMap &src, const FeatureMap &tgt);

// Cosine similarity of co-located rows (the diagonal of the similarity matrix).
Eigen::VectorXd colocated_cosine(const Eigen::MatrixXd &a, const Eigen::MatrixXd &b);

// Linear centered kernel alignment between two location-aligned feature matrices.
double lcka(const Eigen::MatrixXd &a, const Eigen::MatrixXd &b);
double lcka(const FeatureMap &a, const FeatureMap &b);

// Separable Gaussian smoothing with edge replication; sigma per axis in voxels.
std::vector<double> gaussian_smooth(std::span<const float> values, const std::array<int, 3> &dims,
                                    const std::array<double, 3> &sigma_vox);
std::vector<double> gaussian_kernel(double sigma_vox);

// `.vmeta`-style JSON header plus a float32 payload of rows x channels (row-major).
void save_feature_map(const FeatureMap &f, const std::filesystem::path &path);

} // namespace curvereg
