// Copyright Contributors to the dnrf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dnrf/checkpoint.hpp"
